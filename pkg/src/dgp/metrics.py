"""Image-quality metrics and run summaries.

All metrics take display-range images in [0, 1].
"""
from __future__ import annotations

import csv
import math
import statistics
from pathlib import Path

import numpy as np
import torch

from .errors import DomainError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _pair(x, y):
    x = torch.as_tensor(x, dtype=torch.float64)
    y = torch.as_tensor(y, dtype=torch.float64)
    if x.shape != y.shape:
        raise DomainError(f"image shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    return x, y


def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(peak**2 / mse))


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(((x - y) ** 2).mean())


def psnr(x, y, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 99 dB (also returned for identical images)."""
    x, y = _pair(x, y)
    return _psnr_from_mse(float(((x - y) ** 2).mean()), peak)


def psnr_masked(x, y, m, peak: float = 1.0) -> float:
    """PSNR over the missing region ``m == 0`` (the inpainted area)."""
    x, y = _pair(x, y)
    m = torch.as_tensor(m)
    if tuple(m.shape) != tuple(x.shape[-2:]):
        raise DomainError(f"mask shape {tuple(m.shape)} does not match image size {tuple(x.shape[-2:])}")
    region = (m == 0).expand_as(x)
    if not bool(region.any()):
        raise DomainError("mask has no missing pixels; the inpainted region is empty")
    return _psnr_from_mse(float(((x - y)[region] ** 2).mean()), peak)


def _luma(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3 and x.shape[0] == 3:
        w = torch.tensor([0.299, 0.587, 0.114], dtype=x.dtype)
        return torch.einsum("c,chw->hw", w, x)
    if x.dim() == 3 and x.shape[0] == 1:
        return x[0]
    if x.dim() == 2:
        return x
    raise DomainError(f"ssim expects (H, W), (1, H, W) or (3, H, W) images, got {tuple(x.shape)}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(x, y, peak: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM with an 11-tap Gaussian window (sigma 1.5).

    RGB inputs are reduced to luma first. The SSIM map is evaluated only where
    the window fits inside the image, then averaged.
    """
    x, y = _pair(x, y)
    x, y = _luma(x), _luma(y)
    if min(x.shape) < SSIM_WINDOW:
        raise DomainError(f"image {tuple(x.shape)} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()

    def filt(a):
        a = a.unfold(0, SSIM_WINDOW, 1) @ g  # rows
        return a.unfold(1, SSIM_WINDOW, 1) @ g  # columns

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx**2
    syy = filt(y * y) - my**2
    sxy = filt(x * y) - mx * my
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx**2 + my**2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())


# ---------------------------------------------------------------- reporting

SUMMARY_FIELDS = ("name", "task", "method", "psnr", "ssim", "mse", "runtime")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


def make_report(results: list[dict], out_dir, grid_columns=("input", "baseline", "dgp", "reference")) -> dict:
    """Write ``summary.csv`` and ``grid.png`` for a list of per-image results.

    Each result is a dict with the :data:`SUMMARY_FIELDS` (``ssim`` as a
    fraction; it is reported x100) and optionally ``images``: a mapping from
    grid column name to a [0, 1] image. The CSV ends with a ``median`` row.
    """
    from .imageio import contact_sheet, write_png

    if not results:
        raise DomainError("cannot build a report from an empty result list")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in results:
        row = {k: r.get(k) for k in SUMMARY_FIELDS}
        if row["ssim"] is not None:
            row["ssim"] = 100 * row["ssim"]
        rows.append(row)
    medians = {}
    for k in ("psnr", "ssim", "mse", "runtime"):
        vals = [row[k] for row in rows if row[k] is not None]
        medians[k] = statistics.median(vals) if vals else None
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_FIELDS)
        for row in rows:
            w.writerow([_fmt(row[k]) if row[k] is not None else "" for k in SUMMARY_FIELDS])
        w.writerow(["median", "", ""] + [_fmt(medians[k]) if medians[k] is not None else ""
                                         for k in ("psnr", "ssim", "mse", "runtime")])

    grid_rows = []
    for r in results:
        images = r.get("images") or {}
        cells = [images[c] for c in grid_columns if images.get(c) is not None]
        if cells:
            grid_rows.append(cells)
    grid_path = None
    if grid_rows:
        grid_path = write_png(contact_sheet(grid_rows), out_dir / "grid.png")
    return {"summary": out_dir / "summary.csv", "grid": grid_path, "medians": medians}


def read_summary(path) -> tuple[list[dict], dict]:
    """Parse ``summary.csv`` back into (data rows, median row)."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    data = [r for r in rows if r["name"] != "median"]
    footer = next((r for r in rows if r["name"] == "median"), None)
    return data, footer

"""PNG input/output. Files hold [0, 1] images; generator range is [-1, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DomainError


def to_display(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1) / 2).clamp(0, 1)


def to_working(x: torch.Tensor) -> torch.Tensor:
    return x * 2 - 1


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """(C, H, W) tensor in [0, 1] -> (H, W[, C]) uint8 array."""
    arr = x.detach().cpu().double().clamp(0, 1).numpy()
    arr = np.rint(arr * 255).astype(np.uint8)
    if arr.shape[0] == 1:
        return arr[0]
    return arr.transpose(1, 2, 0)


def write_png(x: torch.Tensor, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x)).save(path)
    return path


def read_png(path, channels: int = 3) -> torch.Tensor:
    """Read an image as a float32 (C, H, W) tensor in [0, 1]."""
    mode = {1: "L", 3: "RGB"}[channels]
    arr = np.asarray(Image.open(path).convert(mode), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr))


def read_mask(path) -> np.ndarray:
    """Single-channel PNG, 0 = missing, 255 = observed -> binary (H, W) array."""
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise DomainError(f"{path}: mask must be a single-channel image")
    if not np.isin(arr, (0, 255)).all():
        raise DomainError(f"{path}: mask pixels must be 0 or 255")
    return (arr == 255).astype(np.uint8)


def write_mask(m, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(torch.as_tensor(m).to(torch.uint8).numpy()) * 255
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)
    return path


def contact_sheet(rows: list[list[torch.Tensor]], pad: int = 0) -> torch.Tensor:
    """Tile [0, 1] images (C, H, W) into a grid; rows may be ragged (blank fill)."""
    cols = max(len(r) for r in rows)
    imgs = [im for r in rows for im in r]
    H = max(im.shape[-2] for im in imgs)
    W = max(im.shape[-1] for im in imgs)
    sheet = torch.ones(3, len(rows) * (H + pad) - pad, cols * (W + pad) - pad)
    for i, row in enumerate(rows):
        for j, im in enumerate(row):
            im = im.detach().float()
            if im.shape[0] == 1:
                im = im.expand(3, -1, -1)
            h, w = im.shape[-2:]
            sheet[:, i * (H + pad):i * (H + pad) + h, j * (W + pad):j * (W + pad) + w] = im
    return sheet

"""sRGB <-> CIE-Lab (D65) conversions on channel-first torch tensors.

All functions take images shaped ``(..., 3, H, W)`` with sRGB values in [0, 1]
and are differentiable.
"""
from __future__ import annotations

import torch

# sRGB primaries, D65 white (IEC 61966-2-1)
_RGB_TO_XYZ = (
    (0.4124564, 0.3575761, 0.1804375),
    (0.2126729, 0.7151522, 0.0721750),
    (0.0193339, 0.1191920, 0.9503041),
)
_WHITE = (0.95047, 1.0, 1.08883)
_DELTA = 6.0 / 29.0


def _matrix(values, like: torch.Tensor) -> torch.Tensor:
    return torch.tensor(values, dtype=like.dtype, device=like.device)


def srgb_to_linear(c: torch.Tensor) -> torch.Tensor:
    hi = ((c.clamp(min=0.04045) + 0.055) / 1.055) ** 2.4
    return torch.where(c <= 0.04045, c / 12.92, hi)


def linear_to_srgb(c: torch.Tensor) -> torch.Tensor:
    hi = 1.055 * c.clamp(min=0.0031308) ** (1 / 2.4) - 0.055
    return torch.where(c <= 0.0031308, 12.92 * c, hi)


def _f(t):
    lo = t / (3 * _DELTA**2) + 4.0 / 29.0
    return torch.where(t > _DELTA**3, t.clamp(min=_DELTA**3) ** (1 / 3), lo)


def _finv(t):
    return torch.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def _apply_matrix(m, x):
    return torch.einsum("ij,...jhw->...ihw", m, x)


def rgb_to_lab(rgb: torch.Tensor) -> torch.Tensor:
    """Lab with L in [0, 100]; a, b unbounded (roughly [-128, 127])."""
    xyz = _apply_matrix(_matrix(_RGB_TO_XYZ, rgb), srgb_to_linear(rgb))
    white = _matrix(_WHITE, rgb)[:, None, None]
    fx, fy, fz = _f(xyz / white).unbind(dim=-3)
    L = 116 * fy - 16
    a = 500 * (fx - fy)
    b = 200 * (fy - fz)
    return torch.stack([L, a, b], dim=-3)


def lab_to_rgb(lab: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`rgb_to_lab`; the result is not clipped to the gamut."""
    L, a, b = lab.unbind(dim=-3)
    fy = (L + 16) / 116
    f = torch.stack([fy + a / 500, fy, fy - b / 200], dim=-3)
    xyz = _finv(f) * _matrix(_WHITE, lab)[:, None, None]
    inv = torch.linalg.inv(_matrix(_RGB_TO_XYZ, lab).double()).to(lab.dtype)
    return linear_to_srgb(_apply_matrix(inv, xyz))


def lightness(rgb: torch.Tensor) -> torch.Tensor:
    """CIE L* / 100, shaped ``(..., 1, H, W)``."""
    y = _apply_matrix(_matrix(_RGB_TO_XYZ[1:2], rgb), srgb_to_linear(rgb))
    return (116 * _f(y) - 16) / 100


def neutral_from_lightness(l: torch.Tensor) -> torch.Tensor:
    """sRGB value of the neutral gray whose L*/100 equals ``l``."""
    y = _finv((100 * l + 16) / 116)
    return linear_to_srgb(y.clamp(min=0.0))


def recombine_lightness(rgb: torch.Tensor, l: torch.Tensor, steps: int = 30) -> torch.Tensor:
    """Keep the chroma (a, b) of ``rgb`` and impose lightness ``l`` (L*/100).

    Chroma is scaled down per pixel, by bisection, just enough to stay inside
    the sRGB gamut, so that the lightness of the result equals ``l``.
    """
    rgb64 = rgb.double()
    lab = rgb_to_lab(rgb64)
    L = 100 * l.double().expand_as(lab[..., :1, :, :])
    ab = lab[..., 1:, :, :]

    def build(scale):
        return lab_to_rgb(torch.cat([L, ab * scale], dim=-3))

    def in_gamut(x):
        return ((x >= -1e-9) & (x <= 1 + 1e-9)).all(dim=-3, keepdim=True)

    lo = torch.zeros_like(L)
    hi = torch.ones_like(L)
    ok = in_gamut(build(hi))
    lo = torch.where(ok, hi, lo)
    for _ in range(steps):
        mid = (lo + hi) / 2
        good = in_gamut(build(mid))
        lo = torch.where(good, mid, lo)
        hi = torch.where(good, hi, mid)
    return build(lo).clamp(0, 1).to(rgb.dtype)


def mean_ab(rgb: torch.Tensor) -> torch.Tensor:
    """Mean (a, b) chroma vector of each image, shape ``(..., 2)``."""
    lab = rgb_to_lab(rgb)
    return lab[..., 1:, :, :].mean(dim=(-2, -1))


def hue_angle(rgb: torch.Tensor) -> torch.Tensor:
    """Hue angle (radians) of the mean chroma vector of each image."""
    ab = mean_ab(rgb)
    return torch.atan2(ab[..., 1], ab[..., 0])


def hue_distance(h1, h2):
    """Absolute circular difference between hue angles, in [0, pi]."""
    d = torch.remainder(torch.as_tensor(h1) - torch.as_tensor(h2), 2 * torch.pi)
    return torch.minimum(d, 2 * torch.pi - d)

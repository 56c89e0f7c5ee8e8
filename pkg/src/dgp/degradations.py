"""Degradation transforms: the maps from a clean image to an observation.

Two layers live here. The functional operators (:func:`gray`,
:func:`mask_apply`, :func:`lanczos_downsample`, :func:`perturb_observed`) work on
display-range images in [0, 1]. The :class:`Degradation` classes wrap them for
the reconstruction engine, which works on generator-range images in [-1, 1];
each class also knows how to *lift* its (possibly reduced) observation back to
a full-size RGB image the discriminator can consume.
"""
from __future__ import annotations

import functools
import math

import numpy as np
import torch

from . import color
from .errors import ConfigurationError, DomainError

LANCZOS_A = 3


def _batch(x: torch.Tensor):
    x = torch.as_tensor(x)
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise DomainError(f"expected an image (C,H,W) or batch (N,C,H,W), got shape {tuple(x.shape)}")


def _unbatch(x, single):
    return x[0] if single else x


# ---------------------------------------------------------------- functional

def gray(x: torch.Tensor) -> torch.Tensor:
    """CIE L*/100 of an sRGB image in [0, 1]; returns one channel."""
    xb, single = _batch(x)
    if xb.shape[1] != 3:
        raise DomainError(f"gray expects 3 channels, got {xb.shape[1]}")
    return _unbatch(color.lightness(xb), single)


def _check_mask(m, shape) -> torch.Tensor:
    m = torch.as_tensor(m)
    if tuple(m.shape) != tuple(shape):
        raise DomainError(f"mask shape {tuple(m.shape)} does not match image size {tuple(shape)}")
    if not bool(((m == 0) | (m == 1)).all()):
        raise DomainError("mask must be binary (0 = missing, 1 = observed)")
    return m


def mask_apply(x: torch.Tensor, m) -> torch.Tensor:
    """Zero (black) the pixels where ``m == 0``; ``m`` is (H, W), shared by all channels."""
    xb, single = _batch(x)
    m = _check_mask(m, xb.shape[-2:]).to(torch.bool)
    return _unbatch(torch.where(m, xb, torch.zeros((), dtype=xb.dtype)), single)


def lanczos_kernel(t, a: int = LANCZOS_A):
    t = np.asarray(t, dtype=np.float64)
    out = np.sinc(t) * np.sinc(t / a)
    return np.where(np.abs(t) < a, out, 0.0)


def _reflect(j: int, n: int) -> int:
    if n == 1:
        return 0
    period = 2 * (n - 1)
    j = j % period
    return j if j < n else period - j


@functools.lru_cache(maxsize=64)
def resize_matrix(n_in: int, n_out: int, a: int = LANCZOS_A) -> np.ndarray:
    """Row-normalized 1-D Lanczos resampling matrix of shape (n_out, n_in).

    The kernel is stretched by the downscale factor when shrinking, so it
    also acts as the anti-aliasing filter. Out-of-range taps are reflected
    (no edge repeat).
    """
    scale = n_in / n_out
    support = a * max(scale, 1.0)
    stretch = max(scale, 1.0)
    A = np.zeros((n_out, n_in))
    for i in range(n_out):
        c = (i + 0.5) * scale - 0.5
        for j in range(math.floor(c - support), math.ceil(c + support) + 1):
            w = float(lanczos_kernel((j - c) / stretch, a))
            if w != 0.0:
                A[i, _reflect(j, n_in)] += w
        A[i] /= A[i].sum()
    return A


def _resize(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    Ah = torch.as_tensor(resize_matrix(x.shape[-2], out_h), dtype=x.dtype)
    Aw = torch.as_tensor(resize_matrix(x.shape[-1], out_w), dtype=x.dtype)
    return torch.einsum("ih,...hw,jw->...ij", Ah, x, Aw)


def lanczos_downsample(x: torch.Tensor, f: int) -> torch.Tensor:
    """Separable Lanczos-3 downsampling by an integer factor ``f``."""
    xb, single = _batch(x)
    H, W = xb.shape[-2:]
    if int(f) != f or f < 2:
        raise DomainError(f"downsample factor must be an integer >= 2, got {f}")
    if H % f or W % f:
        raise DomainError(f"factor {f} does not divide image size {H}x{W}")
    return _unbatch(_resize(xb, H // f, W // f), single)


def lanczos_upsample(x: torch.Tensor, f: int) -> torch.Tensor:
    xb, single = _batch(x)
    H, W = xb.shape[-2:]
    return _unbatch(_resize(xb, H * f, W * f), single)


def perturb_observed(x: torch.Tensor, delta: torch.Tensor, eps: float, low: float = 0.0, high: float = 1.0):
    """``clip(x + delta)`` for a perturbation bounded by ``eps`` in max-norm.

    Only used to synthesize observations offline; never part of an objective.
    """
    if eps < 0:
        raise DomainError(f"eps must be >= 0, got {eps}")
    x = torch.as_tensor(x)
    delta = torch.as_tensor(delta, dtype=x.dtype)
    if delta.shape != x.shape:
        raise DomainError(f"perturbation shape {tuple(delta.shape)} != image shape {tuple(x.shape)}")
    if delta.numel() and float(delta.abs().max()) > eps * (1 + 1e-6):
        raise DomainError(f"perturbation max-norm {float(delta.abs().max()):.4g} exceeds eps={eps}")
    return (x + delta).clamp(low, high)


# ---------------------------------------------------------------- transforms

class Degradation:
    """A differentiable observation map on generator-range images ([-1, 1])."""

    kind = "base"

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def lift(self, obs: torch.Tensor) -> torch.Tensor:
        """Embed an observation into the discriminator's 3-channel, full-size input space."""
        raise NotImplementedError

    def observation_shape(self, shape: tuple[int, int, int]) -> tuple[int, int, int]:
        with torch.no_grad():
            return tuple(self.apply(torch.zeros(1, *shape)).shape[1:])

    def to_config(self) -> dict:
        return {"kind": self.kind}

    def __call__(self, x):
        xb, single = _batch(x)
        return _unbatch(self.apply(xb), single)

    def __repr__(self):
        return f"{type(self).__name__}()"


class Identity(Degradation):
    kind = "identity"

    def apply(self, x):
        return x

    def lift(self, obs):
        return obs


class Gray(Degradation):
    kind = "gray"

    def apply(self, x):
        if x.shape[1] != 3:
            raise DomainError(f"gray expects 3 channels, got {x.shape[1]}")
        return 2 * color.lightness((x + 1) / 2) - 1

    def lift(self, obs):
        if obs.shape[1] != 1:
            return obs
        v = color.neutral_from_lightness((obs + 1) / 2)
        return (2 * v - 1).expand(-1, 3, -1, -1)


class Mask(Degradation):
    """Missing pixels (``m == 0``) are set to black (-1 in generator range)."""

    kind = "mask"

    def __init__(self, m, source: dict | None = None):
        m = torch.as_tensor(np.asarray(m))
        if m.dim() != 2:
            raise DomainError(f"mask must be (H, W), got shape {tuple(m.shape)}")
        self.m = _check_mask(m, m.shape).to(torch.bool)
        self.source = source

    @classmethod
    def box(cls, size: int | tuple[int, int], top: int, left: int, height: int, width: int):
        H, W = (size, size) if isinstance(size, int) else size
        m = np.ones((H, W), dtype=np.uint8)
        m[top:top + height, left:left + width] = 0
        return cls(m, source={"box": [top, left, height, width], "size": [H, W]})

    @classmethod
    def central_box(cls, size: int, box: int):
        off = (size - box) // 2
        return cls.box(size, off, off, box, box)

    def apply(self, x):
        if tuple(x.shape[-2:]) != tuple(self.m.shape):
            raise DomainError(f"mask shape {tuple(self.m.shape)} does not match image size {tuple(x.shape[-2:])}")
        return torch.where(self.m, x, torch.full((), -1.0, dtype=x.dtype))

    def lift(self, obs):
        return obs

    def to_config(self):
        cfg = {"kind": self.kind}
        if self.source:
            cfg.update(self.source)
        else:
            cfg["mask"] = self.m.to(torch.uint8).tolist()
        return cfg

    def __repr__(self):
        return f"Mask(missing={int((~self.m).sum())})"


class Downsample(Degradation):
    kind = "downsample"

    def __init__(self, factor: int):
        if int(factor) != factor or factor < 2:
            raise DomainError(f"downsample factor must be an integer >= 2, got {factor}")
        self.factor = int(factor)

    def apply(self, x):
        return lanczos_downsample(x, self.factor)

    def lift(self, obs):
        return lanczos_upsample(obs, self.factor)

    def to_config(self):
        return {"kind": self.kind, "factor": self.factor}

    def __repr__(self):
        return f"Downsample({self.factor})"


class Compose(Degradation):
    """``Compose([a, b, c])(x) == a(b(c(x)))``."""

    kind = "compose"

    def __init__(self, children):
        self.children = list(children)
        if not self.children:
            raise ConfigurationError("compose needs at least one child transform")

    def apply(self, x):
        for t in reversed(self.children):
            x = t.apply(x)
        return x

    def lift(self, obs):
        for t in self.children:
            obs = t.lift(obs)
        return obs

    def to_config(self):
        return {"kind": self.kind, "children": [c.to_config() for c in self.children]}

    def __repr__(self):
        return f"Compose({self.children!r})"


class PerturbObserved(Degradation):
    """Additive perturbation; only for building observations, never for objectives."""

    kind = "perturb_observed"

    def __init__(self, delta, eps: float):
        if eps < 0:
            raise DomainError(f"eps must be >= 0, got {eps}")
        self.delta = torch.as_tensor(delta)
        self.eps = eps

    def apply(self, x):
        # working range [-1, 1] is twice the display range
        return perturb_observed(x, 2 * self.delta.expand_as(x), 2 * self.eps, -1.0, 1.0)

    def lift(self, obs):
        return obs


def from_config(cfg: dict, resolution: int | None = None, base_dir=None) -> Degradation:
    """Build a transform from its JSON description."""
    if not isinstance(cfg, dict) or "kind" not in cfg:
        raise ConfigurationError(f"degradation config needs a 'kind' field: {cfg!r}")
    kind = cfg["kind"]
    if kind == "identity":
        return Identity()
    if kind == "gray":
        return Gray()
    if kind == "downsample":
        return Downsample(cfg.get("factor", 2))
    if kind == "compose":
        return Compose([from_config(c, resolution, base_dir) for c in cfg.get("children", [])])
    if kind == "mask":
        if "box" in cfg:
            size = cfg.get("size", resolution)
            if size is None:
                raise ConfigurationError("box mask needs 'size' or a known resolution")
            return Mask.box(tuple(size) if isinstance(size, list) else size, *cfg["box"])
        if "path" in cfg:
            from .imageio import read_mask
            from pathlib import Path
            p = Path(cfg["path"])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            return Mask(read_mask(p), source={"path": str(cfg["path"])})
        if "mask" in cfg:
            return Mask(np.asarray(cfg["mask"], dtype=np.uint8))
        raise ConfigurationError("mask config needs one of 'box', 'path', 'mask'")
    raise ConfigurationError(f"unknown degradation kind {kind!r}")

"""Manipulating finished reconstructions: latent jitter, morphing and class transfer.

All functions take :class:`ReconstructionResult` objects, return generator-range
images and leave their inputs untouched.
"""
from __future__ import annotations

import copy

import numpy as np
import torch

from .engine import ReconstructionResult
from .errors import DomainError
from .gan_core import Generator


def _generator(result: ReconstructionResult) -> Generator:
    if result.generator is None:
        raise DomainError("result carries no fine-tuned generator; load it with engine.load_result")
    return result.generator


@torch.no_grad()
def _render(G: Generator, z: torch.Tensor, y=None, embed=None) -> torch.Tensor:
    G.eval()
    z = z.reshape(-1, G.arch.latent_dim)
    if embed is None:
        y = torch.full((z.shape[0],), int(y), dtype=torch.long)
    return G(z, y, embed=embed)


def jitter(result: ReconstructionResult, sigma: float, n: int, seed: int = 0,
           noise: torch.Tensor | None = None) -> list[torch.Tensor]:
    """``n`` images ``G(z* + eps_k)`` with ``eps_k ~ N(0, sigma^2 I)``.

    ``noise`` (shape ``(n, d)``) replaces the sampled standard-normal draws;
    passing zeros reproduces ``x_star``.
    """
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    G = _generator(result)
    d = G.arch.latent_dim
    if noise is None:
        gen = torch.Generator().manual_seed(int(seed))
        noise = torch.randn(n, d, generator=gen)
    noise = torch.as_tensor(noise, dtype=result.z_star.dtype)
    if tuple(noise.shape) != (n, d):
        raise DomainError(f"noise must have shape ({n}, {d}), got {tuple(noise.shape)}")
    # one image at a time: batched convolutions round differently from the
    # single-image pass that produced x_star
    return [_render(G, result.z_star + sigma * eps, result.y)[0] for eps in noise]


def transfer_category(result: ReconstructionResult, y_new: int) -> torch.Tensor:
    """Re-render ``z*`` through the fine-tuned generator under class ``y_new``."""
    G = _generator(result)
    if not 0 <= int(y_new) < G.arch.n_classes:
        raise DomainError(f"class index {y_new} outside 0..{G.arch.n_classes - 1}")
    return _render(G, result.z_star, y_new)[0]


def interpolate_state(theta_a: dict, theta_b: dict, lam: float) -> dict:
    """``lam * theta_a + (1 - lam) * theta_b`` entry by entry.

    Float buffers (BN running statistics included) are interpolated like
    weights. Integer buffers are taken from the nearer endpoint. ``lam`` of
    exactly 1 or 0 returns copies of the endpoint, bit for bit.
    """
    if set(theta_a) != set(theta_b):
        diff = sorted(set(theta_a) ^ set(theta_b))
        raise DomainError(f"parameter maps differ in names: {diff[:5]}")
    out = {}
    for k, a in theta_a.items():
        b = theta_b[k]
        if a.shape != b.shape:
            raise DomainError(f"parameter {k!r} has shapes {tuple(a.shape)} and {tuple(b.shape)}")
        if lam == 1 or not a.is_floating_point():
            out[k] = (a if lam >= 0.5 else b).clone()
        elif lam == 0:
            out[k] = b.clone()
        else:
            out[k] = lam * a + (1 - lam) * b
    return out


def morph(res_a: ReconstructionResult, res_b: ReconstructionResult, steps: int,
          interp_class_embedding: bool = True) -> list[torch.Tensor]:
    """Images along the straight line between two reconstructions, A first.

    Latents and generator parameters are interpolated with the same weight.
    With ``interp_class_embedding`` the two selected class-embedding rows are
    mixed too; otherwise each image keeps the class of the nearer endpoint.
    """
    if steps < 2:
        raise DomainError(f"steps must be >= 2, got {steps}")
    Ga, Gb = _generator(res_a), _generator(res_b)
    if Ga.arch != Gb.arch:
        raise DomainError(f"architectures differ: {Ga.arch.to_dict()} vs {Gb.arch.to_dict()}")
    if Ga.norm_mode != Gb.norm_mode:
        raise DomainError(f"normalization modes differ: {Ga.norm_mode} vs {Gb.norm_mode}")
    G = copy.deepcopy(Ga).eval()
    emb_key = "class_embedding.weight"
    frames = []
    for lam in np.linspace(1.0, 0.0, steps):
        lam = float(lam)
        theta = interpolate_state(res_a.theta_star, res_b.theta_star, lam)
        G.load_state_dict(theta)
        if lam == 1:
            z = res_a.z_star
        elif lam == 0:
            z = res_b.z_star
        else:
            z = lam * res_a.z_star + (1 - lam) * res_b.z_star
        if interp_class_embedding and 0 < lam < 1:
            e_a = res_a.theta_star[emb_key][res_a.y]
            e_b = res_b.theta_star[emb_key][res_b.y]
            embed = (lam * e_a + (1 - lam) * e_b).unsqueeze(0)
            frames.append(_render(G, z, embed=embed)[0])
        else:
            y = res_a.y if lam >= 0.5 else res_b.y
            frames.append(_render(G, z, y)[0])
    return frames

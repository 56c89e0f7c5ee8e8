"""Reconstruction engine: loss stack, latent initialization and staged fine-tuning.

The objective for an observation ``x_hat`` under a degradation ``phi`` is::

    d_weight   * sum_i mean|D_i(lift(x_hat)) - D_i(lift(phi(G(z))))|
  + mse_weight * mean((x_hat - phi(G(z)))**2)
  + z_reg_weight * mean(z**2)

optimized over ``z`` alone (``z_only``) or jointly with a growing shallow prefix
of generator blocks (``progressive``), or with all blocks (``joint``).
"""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch
import torch.nn.functional as F

from .degradations import Compose, Degradation, PerturbObserved
from .errors import ConfigurationError, DivergenceError, DomainError, StateError
from .gan_core import NORM_BATCH, NORM_INSTANCE, ConditionalNorm, Discriminator, Generator

log = logging.getLogger(__name__)

MODES = ("progressive", "joint", "z_only")
NORM_POLICIES = ("bn_running", "in_swap")
DEFAULT_CANDIDATES = 500
ADAM_BETAS = (0.0, 0.999)


# ---------------------------------------------------------------- schedule types

@dataclass(frozen=True)
class LossWeights:
    d_weight: float = 1.0
    mse_weight: float = 0.0
    z_reg_weight: float = 0.02

    def __post_init__(self):
        if min(self.d_weight, self.mse_weight, self.z_reg_weight) < 0:
            raise ConfigurationError(f"loss weights must be non-negative: {self}")
        if self.d_weight + self.mse_weight <= 0:
            raise ConfigurationError("d_weight + mse_weight must be positive")


@dataclass(frozen=True)
class Stage:
    blocks_num: int
    iterations: int
    g_lr: float
    z_lr: float
    weights: LossWeights = LossWeights()
    tune_class_embedding: bool = False

    def __post_init__(self):
        if self.blocks_num < 1:
            raise ConfigurationError(f"blocks_num must be >= 1, got {self.blocks_num}")
        if self.iterations < 1:
            raise ConfigurationError(f"stage iterations must be >= 1, got {self.iterations}")
        if self.g_lr < 0 or self.z_lr < 0:
            raise ConfigurationError("learning rates must be non-negative")

    def to_dict(self) -> dict:
        return {
            "blocks_num": self.blocks_num,
            "d_weight": self.weights.d_weight,
            "mse_weight": self.weights.mse_weight,
            "z_reg_weight": self.weights.z_reg_weight,
            "iterations": self.iterations,
            "g_lr": self.g_lr,
            "z_lr": self.z_lr,
            "tune_class_embedding": self.tune_class_embedding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Stage":
        known = {"blocks_num", "d_weight", "mse_weight", "z_reg_weight", "iterations", "g_lr",
                 "z_lr", "tune_class_embedding"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown stage fields: {sorted(unknown)}")
        try:
            weights = LossWeights(float(d.get("d_weight", 1.0)), float(d.get("mse_weight", 0.0)),
                                  float(d.get("z_reg_weight", 0.02)))
            return cls(int(d["blocks_num"]), int(d["iterations"]), float(d["g_lr"]), float(d["z_lr"]),
                       weights, bool(d.get("tune_class_embedding", False)))
        except KeyError as exc:
            raise ConfigurationError(f"stage is missing field {exc.args[0]!r}") from exc


@dataclass(frozen=True)
class ReconstructionSchedule:
    stages: tuple[Stage, ...]
    mode: str = "progressive"
    norm_policy: str = "bn_running"
    early_stop_mse: float | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ConfigurationError("schedule has no stages")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.norm_policy not in NORM_POLICIES:
            raise ConfigurationError(f"unknown norm_policy {self.norm_policy!r}; expected one of {NORM_POLICIES}")
        if self.mode == "z_only" and any(s.g_lr != 0 for s in self.stages):
            raise ConfigurationError("z_only mode requires g_lr == 0 in every stage")
        if self.mode == "progressive":
            nums = [s.blocks_num for s in self.stages]
            if any(b < a for a, b in zip(nums, nums[1:])):
                raise ConfigurationError(f"progressive blocks_num must be non-decreasing, got {nums}")
        if self.early_stop_mse is not None and self.early_stop_mse < 0:
            raise ConfigurationError("early_stop_mse must be non-negative")

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.stages)

    def check_architecture(self, n_blocks: int):
        worst = max(s.blocks_num for s in self.stages)
        if worst > n_blocks:
            raise ConfigurationError(
                f"schedule {self.name or ''!s} unfreezes {worst} blocks but the generator has {n_blocks}"
            )

    def as_z_only(self) -> "ReconstructionSchedule":
        """The fixed-generator baseline: same stages and weights, generator frozen."""
        stages = tuple(replace(s, g_lr=0.0, tune_class_embedding=False) for s in self.stages)
        return replace(self, stages=stages, mode="z_only", name=f"{self.name}_z_only" if self.name else "z_only")

    def with_mode(self, mode: str) -> "ReconstructionSchedule":
        if mode == "z_only":
            return self.as_z_only()
        return replace(self, mode=mode)

    def to_dict(self) -> dict:
        return {
            "version": "dgp-cfg/1",
            "name": self.name,
            "mode": self.mode,
            "norm_policy": self.norm_policy,
            "early_stop_mse": self.early_stop_mse,
            "stages": [s.to_dict() for s in self.stages],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReconstructionSchedule":
        stages = d.get("stages")
        if not isinstance(stages, list):
            raise ConfigurationError("schedule needs a 'stages' list")
        return cls(
            tuple(Stage.from_dict(s) for s in stages),
            mode=d.get("mode", "progressive"),
            norm_policy=d.get("norm_policy", "bn_running"),
            early_stop_mse=d.get("early_stop_mse"),
            name=d.get("name", ""),
        )


@dataclass
class ReconstructionResult:
    z_star: torch.Tensor
    theta_star: dict[str, torch.Tensor]
    y: int
    x_star: torch.Tensor  # (3, H, W) in [-1, 1]
    trajectory: list[dict]
    snapshots: list[torch.Tensor] = field(default_factory=list)
    generator: Generator | None = None
    z0: torch.Tensor | None = None
    stopped_early: bool = False
    runtime: float = 0.0
    schedule: ReconstructionSchedule | None = None

    @property
    def final(self) -> dict:
        return self.trajectory[-1]

    @property
    def initial(self) -> dict:
        return self.trajectory[0]


# ---------------------------------------------------------------- losses

def _as_batch(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def _feature_distance(f1: list[torch.Tensor], f2: list[torch.Tensor]) -> torch.Tensor:
    """Per-sample sum over blocks of the mean absolute feature difference."""
    total = 0
    for a, b in zip(f1, f2):
        total = total + (a - b).abs().flatten(1).mean(dim=1)
    return total


def feature_matching_loss(D: Discriminator, x1: torch.Tensor, x2: torch.Tensor, taps=None) -> torch.Tensor:
    """Discriminator feature distance between two images (or equal-size batches).

    Per block, the mean absolute difference of features; summed over the
    blocks in ``taps`` (all blocks when None). Batches give the mean over samples.
    """
    if x1.shape != x2.shape:
        raise DomainError(f"image shapes differ: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    if taps is not None and len(taps) == 0:
        raise DomainError("feature matching needs at least one discriminator block")
    x1, x2 = _as_batch(x1), _as_batch(x2)
    return _feature_distance(D.features(x1, taps), D.features(x2, taps)).mean()


def _check_phi(phi: Degradation):
    stack = [phi]
    while stack:
        t = stack.pop()
        if isinstance(t, PerturbObserved):
            raise DomainError("perturb_observed builds observations; it cannot be used inside the objective")
        if isinstance(t, Compose):
            stack.extend(t.children)


class Objective:
    """The reconstruction loss for a fixed observation, with cached target features."""

    def __init__(self, D: Discriminator, x_hat: torch.Tensor, phi: Degradation, taps=None):
        _check_phi(phi)
        self.D = D
        self.phi = phi
        self.taps = taps
        self.x_hat = _as_batch(x_hat)
        self._target = None

    def target_features(self):
        if self._target is None:
            with torch.no_grad():
                self._target = self.D.features(self.phi.lift(self.x_hat), self.taps)
        return self._target

    def components(self, x: torch.Tensor, z: torch.Tensor, weights: LossWeights) -> dict:
        """Loss terms for generator output ``x`` (batch of 1) and latent ``z``."""
        obs = self.phi.apply(x)
        if obs.shape[1:] != self.x_hat.shape[1:]:
            raise DomainError(
                f"observation shape {tuple(self.x_hat.shape[1:])} does not match "
                f"phi(G(z)) shape {tuple(obs.shape[1:])}"
            )
        mse = ((obs - self.x_hat) ** 2).mean()
        if weights.d_weight > 0:
            feats = self.D.features(self.phi.lift(obs), self.taps)
            d_loss = _feature_distance(feats, self.target_features()).mean()
        else:
            d_loss = torch.zeros((), dtype=x.dtype)
        zreg = (z**2).mean()
        total = weights.d_weight * d_loss + weights.mse_weight * mse + weights.z_reg_weight * zreg
        return {"total": total, "d": d_loss, "mse": mse, "zreg": zreg}


def total_loss(G: Generator, D: Discriminator, z: torch.Tensor, y, x_hat: torch.Tensor,
               phi: Degradation, w: LossWeights, taps=None):
    """Weighted objective at ``(z, y)``; returns ``(total, components)``."""
    z = _as_batch(z)
    yb = torch.as_tensor(y, dtype=torch.long).reshape(1)
    if z.shape[-1] != G.arch.latent_dim:
        raise DomainError(f"latent has length {z.shape[-1]}, expected {G.arch.latent_dim}")
    if int(yb) >= G.arch.n_classes or int(yb) < 0:
        raise DomainError(f"class index {int(yb)} outside 0..{G.arch.n_classes - 1}")
    comps = Objective(D, x_hat, phi, taps).components(G(z, yb), z, w)
    return comps["total"], comps


# ---------------------------------------------------------------- initialization

@torch.no_grad()
def init_latent(G: Generator, D: Discriminator, x_hat: torch.Tensor, phi: Degradation, y=None,
                n_candidates: int = DEFAULT_CANDIDATES, seed: int = 0, batch_size: int = 100,
                taps=None, return_losses: bool = False):
    """Best of ``n_candidates`` random latents under the discriminator metric.

    When ``y`` is None the class is sampled jointly with each latent. Ties go
    to the lowest candidate index.
    """
    if n_candidates < 1:
        raise DomainError(f"n_candidates must be >= 1, got {n_candidates}")
    gen = torch.Generator().manual_seed(int(seed))
    d = G.arch.latent_dim
    zs = torch.randn(n_candidates, d, generator=gen)
    if y is None:
        ys = torch.randint(0, G.arch.n_classes, (n_candidates,), generator=gen)
    else:
        if not 0 <= int(y) < G.arch.n_classes:
            raise DomainError(f"class index {int(y)} outside 0..{G.arch.n_classes - 1}")
        ys = torch.full((n_candidates,), int(y), dtype=torch.long)
    objective = Objective(D, x_hat, phi, taps)
    target = objective.target_features()
    losses = []
    G.eval()
    for s in range(0, n_candidates, batch_size):
        x = G(zs[s:s + batch_size], ys[s:s + batch_size])
        feats = D.features(phi.lift(phi.apply(x)), taps)
        tgt = [t.expand(x.shape[0], *t.shape[1:]) for t in target]
        losses.append(_feature_distance(feats, tgt))
    losses = torch.cat(losses)
    best = int(torch.argmin(losses))
    out = (zs[best].clone(), int(ys[best]))
    if return_losses:
        return out + (losses,)
    return out


# ---------------------------------------------------------------- BN -> IN

@torch.no_grad()
def swap_bn_to_in(G: Generator, z: torch.Tensor, y) -> Generator:
    """Copy of ``G`` with instance normalization, output-preserving at ``(z, y)``."""
    if G.norm_mode != NORM_BATCH:
        raise StateError("generator normalization is already swapped to instance norm")
    G2 = copy.deepcopy(G).eval()
    norms = [m for m in G2.modules() if isinstance(m, ConditionalNorm)]
    inputs = {}
    hooks = [m.register_forward_pre_hook(lambda mod, args: inputs.__setitem__(mod, args[0].clone()))
             for m in norms]
    try:
        G2(_as_batch(z), torch.as_tensor(y, dtype=torch.long).reshape(1))
    finally:
        for h in hooks:
            h.remove()
    for m in norms:
        m.swap_to_instance(inputs[m])
    return G2


def mark_swapped(G: Generator) -> Generator:
    """Put ``G`` into instance mode with placeholder affine parameters (for loading saved states)."""
    for m in G.modules():
        if isinstance(m, ConditionalNorm) and not m.swapped:
            c = m.bn.num_features
            m.in_shift = torch.nn.Parameter(torch.zeros(c))
            m.in_scale = torch.nn.Parameter(torch.ones(c))
            m.swapped = True
    return G


# ---------------------------------------------------------------- optimization

def trainable_groups(G: Generator, stage: Stage, mode: str):
    """Generator parameters updated in ``stage`` under ``mode``."""
    if mode == "z_only":
        return []
    n = G.arch.n_blocks if mode == "joint" else stage.blocks_num
    params = []
    for j in range(1, n + 1):
        params.extend(G.block_parameters(j))
    if stage.tune_class_embedding:
        params.append(G.class_embedding.weight)
    return params


def psnr_working(x: torch.Tensor, ref: torch.Tensor) -> float:
    """PSNR in display space for two generator-range images."""
    mse = float((((x - ref) / 2) ** 2).mean())
    return 99.0 if mse == 0 else min(99.0, 10 * math.log10(1.0 / mse))


def run_dgp(G: Generator, D: Discriminator, x_hat: torch.Tensor, phi: Degradation, y,
            schedule: ReconstructionSchedule, seed: int = 0, z0: torch.Tensor | None = None,
            n_candidates: int = DEFAULT_CANDIDATES, reference: torch.Tensor | None = None,
            taps=None, callback=None) -> ReconstructionResult:
    """Reconstruct ``x_hat`` (generator range) by staged optimization of z and G.

    ``G`` is never modified; fine-tuning happens on a private copy, returned as
    ``result.generator``. With ``z0`` given, initialization is skipped and ``y``
    is required. ``reference`` (clean image, generator range) enables PSNR
    tracking.
    """
    t_start = time.perf_counter()
    schedule.check_architecture(G.arch.n_blocks)
    _check_phi(phi)
    x_hat = _as_batch(torch.as_tensor(x_hat)).detach()
    D = D.eval()
    for p in D.parameters():
        p.requires_grad_(False)
    G = copy.deepcopy(G).eval()
    for p in G.parameters():
        p.requires_grad_(False)

    expected = phi.observation_shape((3, G.arch.resolution, G.arch.resolution))
    if tuple(x_hat.shape[1:]) != tuple(expected):
        raise ConfigurationError(
            f"observation has shape {tuple(x_hat.shape[1:])}, but phi(G(z)) has shape {tuple(expected)}"
        )

    if z0 is None:
        z0, y = init_latent(G, D, x_hat, phi, y, n_candidates, seed=seed, taps=taps)
    elif y is None:
        raise DomainError("an explicit z0 needs a class index y")
    y = int(y)
    if not 0 <= y < G.arch.n_classes:
        raise DomainError(f"class index {y} outside 0..{G.arch.n_classes - 1}")
    z0 = torch.as_tensor(z0, dtype=torch.float32).reshape(-1).clone()
    if z0.numel() != G.arch.latent_dim:
        raise DomainError(f"z0 has length {z0.numel()}, expected {G.arch.latent_dim}")

    if schedule.norm_policy == "in_swap" and schedule.mode != "z_only":
        G = swap_bn_to_in(G, z0, y)
        for p in G.parameters():
            p.requires_grad_(False)

    yb = torch.tensor([y])
    z = z0.clone().unsqueeze(0).requires_grad_(True)
    objective = Objective(D, x_hat, phi, taps)
    ref = None if reference is None else _as_batch(torch.as_tensor(reference))

    trajectory: list[dict] = []
    snapshots: list[torch.Tensor] = []
    healthy = None
    it = 0
    stopped = False

    def record(stage_idx, comps, x):
        row = {
            "iteration": it,
            "stage": stage_idx,
            "loss_total": comps["total"].item(),
            "loss_d": comps["d"].item(),
            "loss_mse": comps["mse"].item(),
            "loss_zreg": comps["zreg"].item(),
            "psnr": psnr_working(x.detach(), ref) if ref is not None else None,
        }
        trajectory.append(row)
        return row

    x = None
    for s_idx, stage in enumerate(schedule.stages, start=1):
        params = trainable_groups(G, stage, schedule.mode)
        groups = [{"params": [z], "lr": stage.z_lr}]
        if params and stage.g_lr > 0:
            for p in params:
                p.requires_grad_(True)
            groups.append({"params": params, "lr": stage.g_lr})
        opt = torch.optim.Adam(groups, betas=ADAM_BETAS)
        for _ in range(stage.iterations):
            it += 1
            x = G(z, yb)
            comps = objective.components(x, z, stage.weights)
            if not torch.isfinite(comps["total"]):
                err = DivergenceError(f"non-finite loss at iteration {it} (stage {s_idx})")
                err.last_healthy = healthy
                raise err
            row = record(s_idx, comps, x)
            if callback is not None:
                callback(row)
            if schedule.early_stop_mse is not None and row["loss_mse"] <= schedule.early_stop_mse:
                stopped = True
                break
            healthy = (z.detach().clone(), x.detach().clone())
            opt.zero_grad(set_to_none=True)
            comps["total"].backward()
            opt.step()
        for p in params:
            p.requires_grad_(False)
        if stopped:
            break
        with torch.no_grad():
            snapshots.append(G(z, yb)[0].detach().clone())

    z_star = z.detach()[0].clone()
    with torch.no_grad():
        x_star = G(z_star.unsqueeze(0), yb)[0].clone()
        if not stopped:
            it += 1
            comps = objective.components(x_star.unsqueeze(0), z_star.unsqueeze(0), schedule.stages[-1].weights)
            record(len(schedule.stages), comps, x_star.unsqueeze(0))
        else:
            snapshots.append(x_star.clone())
    theta = {k: v.detach().clone() for k, v in G.state_dict().items()}
    return ReconstructionResult(
        z_star=z_star, theta_star=theta, y=y, x_star=x_star, trajectory=trajectory,
        snapshots=snapshots, generator=G, z0=z0, stopped_early=stopped,
        runtime=time.perf_counter() - t_start, schedule=schedule,
    )


# ---------------------------------------------------------------- persistence

TRAJECTORY_FIELDS = ("iteration", "stage", "loss_total", "loss_d", "loss_mse", "loss_zreg", "psnr")


def write_trajectory(trajectory: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRAJECTORY_FIELDS)
        w.writeheader()
        for row in trajectory:
            w.writerow({k: ("" if row.get(k) is None else row[k]) for k in TRAJECTORY_FIELDS})
    return path


def read_trajectory(path) -> list[dict]:
    rows = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rows.append({k: (None if v == "" else (int(v) if k in ("iteration", "stage") else float(v)))
                         for k, v in row.items()})
    return rows


def save_result(result: ReconstructionResult, path) -> Path:
    """Everything needed to regenerate ``x_star`` and manipulate it later."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "arch": result.generator.arch.to_dict(),
        "norm_mode": result.generator.norm_mode,
        "z_star": result.z_star,
        "y": result.y,
        "theta_star": result.theta_star,
        "x_star": result.x_star,
        "trajectory": result.trajectory,
    }, path)
    return path


def load_result(path) -> ReconstructionResult:
    from .gan_core import ArchConfig

    st = torch.load(path, weights_only=False)
    G = Generator(ArchConfig.from_dict(st["arch"]))
    if st["norm_mode"] == NORM_INSTANCE:
        mark_swapped(G)
    G.load_state_dict(st["theta_star"])
    G.eval()
    for p in G.parameters():
        p.requires_grad_(False)
    return ReconstructionResult(
        z_star=st["z_star"], theta_star=st["theta_star"], y=st["y"], x_star=st["x_star"],
        trajectory=st["trajectory"], generator=G,
    )

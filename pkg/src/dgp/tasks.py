"""Restoration tasks built on the reconstruction engine.

Inputs and outputs of these functions are display-range images in [0, 1];
the engine itself works in generator range [-1, 1].
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import color, engine, metrics
from .degradations import Compose, Downsample, Gray, Identity, Mask
from .engine import ReconstructionResult, ReconstructionSchedule
from .errors import ConfigurationError, DomainError
from .gan_core import Discriminator, Generator
from .imageio import to_display, to_working, write_png
from .presets import load_preset

TASKS = ("colorize", "inpaint", "super_resolve", "hybrid", "defend")
DEFAULT_PRESETS = {
    "colorize": "colorization",
    "inpaint": "inpainting",
    "super_resolve": "sr_mse",
    "hybrid": "colorization",
    "defend": "defense",
    "reconstruct": "inpainting",
}
HYBRID_ORDER = ("downsample", "mask", "gray")


@dataclass
class TaskOutput:
    image: torch.Tensor  # (3, H, W) in [0, 1]
    result: ReconstructionResult
    observation: torch.Tensor  # display range, shape of phi's output
    phi: object = None
    metrics: dict = field(default_factory=dict)
    task: str = ""


def _schedule(preset, mode: str | None = None) -> ReconstructionSchedule:
    sched = load_preset(preset) if isinstance(preset, str) else preset
    if mode is not None and mode != sched.mode:
        sched = sched.with_mode(mode)
    return sched


def _require_class(y, task):
    if y is None:
        raise ConfigurationError(f"{task} needs a class label y (only defend samples it)")
    return int(y)


def _run(G, D, obs, phi, y, schedule, seed, n_candidates, reference, z0=None):
    ref = None if reference is None else to_working(torch.as_tensor(reference))
    return engine.run_dgp(G, D, to_working(obs), phi, y, schedule, seed=seed, z0=z0,
                          n_candidates=n_candidates, reference=ref)


def reconstruct(G: Generator, D: Discriminator, x: torch.Tensor, y, preset="inpainting", seed: int = 0,
                n_candidates: int = engine.DEFAULT_CANDIDATES, mode: str | None = None, z0=None) -> TaskOutput:
    """Plain reconstruction of a clean image (identity degradation)."""
    y = _require_class(y, "reconstruct")
    res = _run(G, D, x, Identity(), y, _schedule(preset, mode), seed, n_candidates, x, z0)
    out = to_display(res.x_star)
    return TaskOutput(out, res, x, Identity(), {"psnr": metrics.psnr(out, x), "ssim": metrics.ssim(out, x),
                                                "mse": metrics.mse(out, x)}, "reconstruct")


def colorize(G: Generator, D: Discriminator, x_gray: torch.Tensor, y, preset="colorization", seed: int = 0,
             n_candidates: int = engine.DEFAULT_CANDIDATES, mode: str | None = None,
             reference: torch.Tensor | None = None) -> TaskOutput:
    """Colour a lightness image (L*/100, shape (1, H, W)).

    The chroma of the reconstruction is kept and its lightness replaced by
    the input, so ``gray(output)`` reproduces ``x_gray``.
    """
    x_gray = torch.as_tensor(x_gray)
    if x_gray.dim() == 2:
        x_gray = x_gray.unsqueeze(0)
    if x_gray.shape[0] != 1:
        raise DomainError(f"colorize expects a single-channel image, got shape {tuple(x_gray.shape)}")
    y = _require_class(y, "colorize")
    res = _run(G, D, x_gray, Gray(), y, _schedule(preset, mode), seed, n_candidates, reference)
    out = color.recombine_lightness(to_display(res.x_star), x_gray).float()
    m = {}
    if reference is not None:
        m = {"psnr": metrics.psnr(out, reference), "ssim": metrics.ssim(out, reference),
             "mse": metrics.mse(out, reference)}
    return TaskOutput(out, res, x_gray, Gray(), m, "colorize")


def inpaint(G: Generator, D: Discriminator, x: torch.Tensor, m, y, preset="inpainting", seed: int = 0,
            n_candidates: int = engine.DEFAULT_CANDIDATES, mode: str | None = None,
            reference: torch.Tensor | None = None) -> TaskOutput:
    """Fill the pixels where ``m == 0``; observed pixels are copied from ``x``."""
    x = torch.as_tensor(x)
    y = _require_class(y, "inpaint")
    sched = _schedule(preset, mode)
    if sched.mode != "z_only" and not any(s.tune_class_embedding for s in sched.stages):
        raise ConfigurationError("the inpainting preset must fine-tune the class embedding")
    phi = m if isinstance(m, Mask) else Mask(m)
    obs = to_display(phi(to_working(x)))
    res = _run(G, D, obs, phi, y, sched, seed, n_candidates, reference)
    keep = phi.m.expand_as(x)
    out = torch.where(keep, x, to_display(res.x_star).to(x.dtype))
    mt = {}
    if reference is not None:
        mt = {"psnr_masked": metrics.psnr_masked(out, reference, phi.m),
              "psnr": metrics.psnr(out, reference), "ssim": metrics.ssim(out, reference),
              "mse": metrics.mse(out, reference)}
    return TaskOutput(out, res, obs, phi, mt, "inpaint")


def super_resolve(G: Generator, D: Discriminator, x_lr: torch.Tensor, f: int, y, preset="sr_mse",
                  seed: int = 0, n_candidates: int = engine.DEFAULT_CANDIDATES, mode: str | None = None,
                  reference: torch.Tensor | None = None) -> TaskOutput:
    """Upscale ``x_lr`` by ``f`` so that its Lanczos downsampling matches the input."""
    x_lr = torch.as_tensor(x_lr)
    H = G.arch.resolution
    if x_lr.shape[-1] * f != H or x_lr.shape[-2] * f != H:
        raise ConfigurationError(
            f"low-res input {tuple(x_lr.shape[-2:])} x factor {f} does not give the generator size {H}x{H}"
        )
    y = _require_class(y, "super_resolve")
    phi = Downsample(f)
    res = _run(G, D, x_lr, phi, y, _schedule(preset, mode), seed, n_candidates, reference)
    out = to_display(res.x_star)
    m = {}
    if reference is not None:
        m = {"psnr": metrics.psnr(out, reference), "ssim": metrics.ssim(out, reference),
             "mse": metrics.mse(out, reference)}
    return TaskOutput(out, res, x_lr, phi, m, "super_resolve")


def defend(G: Generator, D: Discriminator, x_adv: torch.Tensor, preset="defense", seed: int = 0,
           n_candidates: int = engine.DEFAULT_CANDIDATES, mode: str | None = None,
           reference: torch.Tensor | None = None) -> TaskOutput:
    """Re-synthesize a perturbed image; latent and class are both sampled at init.

    The preset stops as soon as the observation MSE reaches its threshold, so
    the output keeps the content but not the fine perturbation.
    """
    x_adv = torch.as_tensor(x_adv)
    if float(x_adv.min()) < 0 or float(x_adv.max()) > 1:
        raise DomainError("defend expects an image in [0, 1]")
    res = _run(G, D, x_adv, Identity(), None, _schedule(preset, mode), seed, n_candidates, reference)
    out = to_display(res.x_star)
    m = {}
    if reference is not None:
        m = {"psnr": metrics.psnr(out, reference), "ssim": metrics.ssim(out, reference),
             "mse": metrics.mse(out, reference)}
    return TaskOutput(out, res, x_adv, Identity(), m, "defend")


def hybrid_transform(m=None, f: int = 1, order=HYBRID_ORDER, use_gray: bool = True):
    """Compose the hybrid degradation; ``order`` lists steps outermost first.

    Steps that would do nothing (``f == 1``, no mask, ``use_gray=False``) are dropped.
    """
    parts = []
    for step in order:
        if step == "gray" and use_gray:
            parts.append(Gray())
        elif step == "mask" and m is not None:
            mk = m if isinstance(m, Mask) else Mask(m)
            if not bool(mk.m.all()):
                parts.append(mk)
        elif step == "downsample" and f > 1:
            parts.append(Downsample(f))
        elif step not in HYBRID_ORDER:
            raise ConfigurationError(f"unknown hybrid step {step!r}")
    if not parts:
        return Identity()
    return parts[0] if len(parts) == 1 else Compose(parts)


def hybrid(G: Generator, D: Discriminator, x_obs: torch.Tensor, m, f: int, y, preset="colorization",
           seed: int = 0, n_candidates: int = engine.DEFAULT_CANDIDATES, mode: str | None = None,
           order=HYBRID_ORDER, use_gray: bool = True, reference: torch.Tensor | None = None) -> TaskOutput:
    """Joint colorization / inpainting / super-resolution from one observation.

    ``x_obs`` is the observation itself (display range). The lightness of the
    observation is imposed on the output only where it is known at full
    resolution (gray step present, ``f == 1``, pixel observed).
    """
    x_obs = torch.as_tensor(x_obs)
    y = _require_class(y, "hybrid")
    phi = hybrid_transform(m, f, order, use_gray)
    res = _run(G, D, x_obs, phi, y, _schedule(preset, mode), seed, n_candidates, reference)
    out = to_display(res.x_star)
    if use_gray and f == 1:
        rec = color.recombine_lightness(out, x_obs[:1] if x_obs.shape[0] == 1 else x_obs[:1]).float()
        if m is None:
            out = rec
        else:
            keep = (m.m if isinstance(m, Mask) else torch.as_tensor(m).bool()).expand_as(out)
            out = torch.where(keep, rec, out)
    mt = {}
    if reference is not None:
        mt = {"psnr": metrics.psnr(out, reference), "ssim": metrics.ssim(out, reference),
              "mse": metrics.mse(out, reference)}
    return TaskOutput(out, res, x_obs, phi, mt, "hybrid")


# ---------------------------------------------------------------- persistence

def observation_mse(result: ReconstructionResult) -> tuple[float, float]:
    """(initial, final) observation-space MSE from a trajectory."""
    return result.initial["loss_mse"], result.final["loss_mse"]


def save_task_output(out: TaskOutput, directory, request: dict | None = None) -> Path:
    """``result.png``, ``trajectory.csv``, ``snapshots/``, ``meta.json`` and ``reconstruction.pt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_png(out.image, directory / "result.png")
    write_png(out.observation.clamp(0, 1), directory / "observation.png")
    engine.write_trajectory(out.result.trajectory, directory / "trajectory.csv")
    for k, snap in enumerate(out.result.snapshots, start=1):
        write_png(to_display(snap), directory / "snapshots" / f"stage_{k}.png")
    engine.save_result(out.result, directory / "reconstruction.pt")
    init_mse, final_mse = observation_mse(out.result)
    meta = {
        "task": out.task,
        "request": request or {},
        "y": out.result.y,
        "phi": out.phi.to_config() if out.phi is not None else None,
        "iterations": len(out.result.trajectory),
        "stopped_early": out.result.stopped_early,
        "runtime": out.result.runtime,
        "metrics": {**out.metrics, "observation_mse_initial": init_mse, "observation_mse_final": final_mse},
    }
    if out.result.schedule is not None:
        meta["schedule"] = out.result.schedule.to_dict()
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return directory


# ---------------------------------------------------------------- hue oracle

def hue_assignment(images: torch.Tensor, labels, signatures: torch.Tensor, seed: int = 0,
                   strict: bool = False) -> torch.Tensor:
    """Per-image bool: is the mean hue nearer the own class signature than a rival's?

    The rival is a random other class (drawn with ``seed``), or, with
    ``strict``, every other class.
    """
    images = torch.as_tensor(images)
    if images.dim() == 3:
        images = images.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    h = color.hue_angle(images.double())
    dist = color.hue_distance(h[:, None], signatures.double()[None])  # (N, C)
    own = dist.gather(1, labels[:, None])[:, 0]
    if strict:
        others = dist.scatter(1, labels[:, None], float("inf"))
        return own < others.min(dim=1).values
    C = signatures.shape[0]
    gen = torch.Generator().manual_seed(int(seed))
    rival = (labels + torch.randint(1, C, labels.shape, generator=gen)) % C
    return own < dist.gather(1, rival[:, None])[:, 0]


@dataclass
class TaskRequest:
    """One task invocation as read from a run config."""

    task: str
    input: str
    mask: object = None  # path, box spec or inline list
    factor: int | None = None
    preset: str | dict | None = None  # preset name or an inline schedule
    y: int | None = None
    seed: int = 0
    name: str = ""

    def validate(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}; valid tasks: {', '.join(TASKS)}")
        if self.task == "inpaint" and self.mask is None:
            raise ConfigurationError("inpaint needs a 'mask'")
        if self.task == "super_resolve" and not self.factor:
            raise ConfigurationError("super_resolve needs a 'factor'")
        if self.task != "defend" and self.y is None:
            raise ConfigurationError(f"{self.task} needs a class label 'y'")
        if self.task == "defend" and self.y is not None:
            raise ConfigurationError("defend samples the class itself; drop 'y'")
        return self

    def schedule(self) -> ReconstructionSchedule:
        if isinstance(self.preset, dict):
            from .presets import schedule_from_dict
            return schedule_from_dict(self.preset)
        return load_preset(self.preset or DEFAULT_PRESETS[self.task])

    @classmethod
    def from_dict(cls, d: dict) -> "TaskRequest":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown task field(s): {', '.join(sorted(extra))}")
        if "task" not in d or "input" not in d:
            raise ConfigurationError("task entries need 'task' and 'input'")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

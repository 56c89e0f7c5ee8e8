"""Adversarial pre-training of the miniature conditional GAN on the toy corpus."""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, save_checkpoint
from .corpus import ToyDataset
from .errors import ConfigurationError, DivergenceError
from .gan_core import ArchConfig, Discriminator, Generator, build_pair

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    iterations: int = 3000
    g_lr: float = 2e-4
    d_lr: float = 4e-4
    betas: tuple[float, float] = (0.0, 0.999)
    d_steps: int = 1
    ema_decay: float = 0.999
    ema_start: int = 500
    standing_stats_batches: int = 32
    checkpoint_every: int = 0
    seed: int = 0
    loss: str = "hinge"

    def validate(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        for name in ("batch_size", "g_lr", "d_lr", "d_steps"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ConfigurationError("ema_decay must lie in [0, 1)")
        if self.loss != "hinge":
            raise ConfigurationError(f"unsupported adversarial loss {self.loss!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def d_hinge_loss(real_logits, fake_logits):
    return F.relu(1 - real_logits).mean() + F.relu(1 + fake_logits).mean()


def g_hinge_loss(fake_logits):
    return -fake_logits.mean()


@torch.no_grad()
def _ema_update(ema: Generator, G: Generator, decay: float):
    for pe, p in zip(ema.parameters(), G.parameters()):
        pe.mul_(decay).add_(p, alpha=1 - decay)


@torch.no_grad()
def standing_statistics(G: Generator, n_batches: int, batch_size: int, gen: torch.Generator):
    """Re-estimate BN running statistics as a plain average over fresh samples."""
    bns = [m for m in G.modules() if isinstance(m, torch.nn.BatchNorm2d)]
    saved = [bn.momentum for bn in bns]
    for bn in bns:
        bn.reset_running_stats()
        bn.momentum = None
    G.train()
    for _ in range(n_batches):
        z = torch.randn(batch_size, G.arch.latent_dim, generator=gen)
        y = torch.randint(0, G.arch.n_classes, (batch_size,), generator=gen)
        G(z, y)
    G.eval()
    for bn, m in zip(bns, saved):
        bn.momentum = m


class Trainer:
    """Stateful training loop; its whole state can be saved and resumed."""

    def __init__(self, dataset: ToyDataset, cfg: TrainConfig, arch: ArchConfig | None = None):
        cfg.validate()
        if len(dataset) == 0:
            raise ConfigurationError("training dataset is empty")
        arch = arch or ArchConfig(n_classes=dataset.spec.n_classes, resolution=dataset.resolution)
        if arch.resolution != dataset.resolution:
            raise ConfigurationError(
                f"architecture resolution {arch.resolution} != dataset resolution {dataset.resolution}"
            )
        if int(dataset.labels.max()) >= arch.n_classes:
            raise ConfigurationError("dataset has more classes than the architecture")
        self.dataset = dataset
        self.cfg = cfg
        self.arch = arch
        self.G, self.D = build_pair(arch, seed=cfg.seed)
        self.G_ema = copy.deepcopy(self.G)
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=cfg.g_lr, betas=cfg.betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=cfg.d_lr, betas=cfg.betas)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.iteration = 0
        self.history: list[dict] = []
        self._real = dataset.images * 2 - 1

    def _batch(self):
        idx = torch.randint(0, len(self.dataset), (self.cfg.batch_size,), generator=self.gen)
        z = torch.randn(self.cfg.batch_size, self.arch.latent_dim, generator=self.gen)
        y_fake = torch.randint(0, self.arch.n_classes, (self.cfg.batch_size,), generator=self.gen)
        return self._real[idx], self.dataset.labels[idx], z, y_fake

    def step(self) -> dict:
        cfg = self.cfg
        self.G.train()
        self.D.train()
        for _ in range(cfg.d_steps):
            x_real, y_real, z, y_fake = self._batch()
            with torch.no_grad():
                x_fake = self.G(z, y_fake)
            loss_d = d_hinge_loss(self.D(x_real, y_real), self.D(x_fake, y_fake))
            if not torch.isfinite(loss_d):
                raise DivergenceError(
                    f"discriminator loss is {loss_d.item()} at iteration {self.iteration + 1}; "
                    f"try lower learning rates"
                )
            self.opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            self.opt_d.step()

        _, _, z, y_fake = self._batch()
        for p in self.D.parameters():
            p.requires_grad_(False)
        loss_g = g_hinge_loss(self.D(self.G(z, y_fake), y_fake))
        for p in self.D.parameters():
            p.requires_grad_(True)
        self.opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        self.opt_g.step()

        self.iteration += 1
        decay = cfg.ema_decay if self.iteration > cfg.ema_start else 0.0
        _ema_update(self.G_ema, self.G, decay)
        rec = {"iteration": self.iteration, "loss_d": loss_d.item(), "loss_g": loss_g.item()}
        self.history.append(rec)
        return rec

    # -- persistence -------------------------------------------------------
    def state(self) -> dict:
        return {
            "iteration": self.iteration,
            "G": self.G.state_dict(),
            "D": self.D.state_dict(),
            "G_ema": self.G_ema.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "rng": self.gen.get_state(),
            "history": list(self.history),
            "cfg": asdict(self.cfg),
            "arch": self.arch.to_dict(),
        }

    def save_state(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state(), path)
        return path

    def load_state(self, path):
        st = torch.load(path, weights_only=False)
        if ArchConfig.from_dict(st["arch"]) != self.arch:
            raise ConfigurationError("training state was produced with a different architecture")
        self.G.load_state_dict(st["G"])
        self.D.load_state_dict(st["D"])
        self.G_ema.load_state_dict(st["G_ema"])
        self.opt_g.load_state_dict(st["opt_g"])
        self.opt_d.load_state_dict(st["opt_d"])
        self.gen.set_state(st["rng"])
        self.iteration = st["iteration"]
        self.history = list(st["history"])

    def finalize(self) -> Checkpoint:
        """EMA generator with standing BN statistics, packaged with the discriminator."""
        G = copy.deepcopy(self.G_ema)
        gen = torch.Generator().manual_seed(self.cfg.seed + 1)
        standing_statistics(G, self.cfg.standing_stats_batches, self.cfg.batch_size, gen)
        self.D.eval()
        return Checkpoint.from_modules(
            G, self.D, seed=self.cfg.seed, iterations=self.iteration,
            train_config=asdict(self.cfg), corpus=asdict(self.dataset.spec),
        )


def pretrain_gan(dataset: ToyDataset, cfg: TrainConfig = TrainConfig(), arch: ArchConfig | None = None,
                 state_dir=None, resume_from=None, log_every: int = 100) -> Checkpoint:
    """Train a GAN prior on ``dataset``; returns the finished checkpoint.

    With ``state_dir`` and ``cfg.checkpoint_every > 0`` the full training state is
    written every ``checkpoint_every`` iterations as ``state_XXXXXX.pt``;
    ``resume_from`` restarts from such a file.
    """
    trainer = Trainer(dataset, cfg, arch)
    if resume_from is not None:
        trainer.load_state(resume_from)
    while trainer.iteration < cfg.iterations:
        rec = trainer.step()
        if log_every and rec["iteration"] % log_every == 0:
            log.info("iter %d  loss_d %.4f  loss_g %.4f", rec["iteration"], rec["loss_d"], rec["loss_g"])
        if state_dir is not None and cfg.checkpoint_every and trainer.iteration % cfg.checkpoint_every == 0:
            trainer.save_state(Path(state_dir) / f"state_{trainer.iteration:06d}.pt")
    ckpt = trainer.finalize()
    ckpt.metadata["final_loss_d"] = trainer.history[-1]["loss_d"] if trainer.history else None
    ckpt.metadata["final_loss_g"] = trainer.history[-1]["loss_g"] if trainer.history else None
    ckpt.history = trainer.history
    return ckpt


def train_to_file(dataset, cfg, out, arch=None, **kw) -> Path:
    ckpt = pretrain_gan(dataset, cfg, arch, **kw)
    return save_checkpoint(ckpt, out)

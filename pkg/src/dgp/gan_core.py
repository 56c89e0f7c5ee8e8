"""Miniature class-conditional generator / discriminator pair.

The generator is a ladder of conv blocks. Block 1 (the shallowest) owns the
latent projection, the last block owns the RGB output head. Every block carries
its own class-conditional normalization layers, whose gains and biases are
projected from a shared class embedding table (kept outside the blocks).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DomainError, StateError

NORM_BATCH = "batch_running_stats"
NORM_INSTANCE = "instance_swapped"


@dataclass(frozen=True)
class ArchConfig:
    """Architecture descriptor shared by the generator, discriminator and checkpoints."""

    n_blocks: int = 6
    n_classes: int = 10
    latent_dim: int = 64
    resolution: int = 32
    embed_dim: int = 32
    g_channels: tuple[int, ...] = (64, 64, 48, 32, 24, 16)
    d_channels: tuple[int, ...] = (16, 32, 48, 64)
    spectral_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "g_channels", tuple(int(c) for c in self.g_channels))
        object.__setattr__(self, "d_channels", tuple(int(c) for c in self.d_channels))
        self.validate()

    def validate(self):
        H = self.resolution
        if H < 32 or H & (H - 1):
            raise ConfigurationError(f"resolution must be a power of two >= 32, got {H}")
        if self.n_blocks < 3:
            raise ConfigurationError(
                f"n_blocks={self.n_blocks}: the ladder needs a stem plus at least two "
                f"upsampling blocks (n_blocks >= 3)"
            )
        if self.n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.latent_dim < 8:
            raise ConfigurationError(f"latent_dim must be >= 8, got {self.latent_dim}")
        if len(self.g_channels) != self.n_blocks:
            raise ConfigurationError(
                f"g_channels has {len(self.g_channels)} entries for {self.n_blocks} blocks"
            )
        if len(self.d_channels) < 2:
            raise ConfigurationError("discriminator needs at least two blocks")
        if min(self.g_channels + self.d_channels) < 1 or self.embed_dim < 1:
            raise ConfigurationError("channel widths and embed_dim must be positive")

    @property
    def n_upsamples(self) -> int:
        return min(self.n_blocks - 1, int(math.log2(self.resolution // 4)))

    @property
    def base_resolution(self) -> int:
        return self.resolution >> self.n_upsamples

    def block_resolutions(self) -> list[int]:
        """Output resolution of each generator block, shallow to deep.

        The deepest block always performs the last upsample (as the final
        up-block of BigGAN does); earlier upsamples come as early as possible and
        any surplus blocks refine at half the output resolution in between.
        """
        res = [self.base_resolution]
        for j in range(1, self.n_blocks):
            last = j == self.n_blocks - 1
            early = res[-1] * 2 < self.resolution
            res.append(res[-1] * 2 if last or early else res[-1])
        return res

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["g_channels"] = list(self.g_channels)
        d["d_channels"] = list(self.d_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown architecture fields: {sorted(unknown)}")
        return cls(**d)


class ConditionalNorm(nn.Module):
    """Batch norm with class-conditional gain and bias.

    In ``batch_running_stats`` mode the normalization uses the BN statistics
    (running statistics in eval mode). After :meth:`swap_to_instance` it uses
    per-instance statistics followed by a learnable per-channel scale/shift.
    """

    def __init__(self, channels: int, embed_dim: int, eps: float = 1e-5, in_eps: float = 1e-5):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels, affine=False, eps=eps)
        self.gain = nn.Linear(embed_dim, channels, bias=False)
        self.bias = nn.Linear(embed_dim, channels, bias=False)
        nn.init.zeros_(self.gain.weight)
        nn.init.zeros_(self.bias.weight)
        self.in_eps = in_eps
        self.swapped = False

    def normalize(self, x):
        if not self.swapped:
            return self.bn(x)
        mu = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
        h = (x - mu) / torch.sqrt(var + self.in_eps)
        return h * self.in_scale[None, :, None, None] + self.in_shift[None, :, None, None]

    def forward(self, x, e):
        h = self.normalize(x)
        return h * (1 + self.gain(e))[:, :, None, None] + self.bias(e)[:, :, None, None]

    @torch.no_grad()
    def swap_to_instance(self, x: torch.Tensor):
        """Switch to instance statistics, preserving the output on input ``x``.

        The new shift/scale are the per-channel mean and (eps-consistent) std of
        the BN-normalized features of ``x``.
        """
        if self.swapped:
            raise StateError("normalization layer already swapped to instance norm")
        bn = self.bn
        denom = torch.sqrt(bn.running_var + bn.eps)
        normed = (x[0] - bn.running_mean[:, None, None]) / denom[:, None, None]
        shift = normed.mean(dim=(1, 2))
        var = x[0].var(dim=(1, 2), unbiased=False)
        scale = torch.sqrt((var + self.in_eps)) / denom
        self.in_shift = nn.Parameter(shift.clone())
        self.in_scale = nn.Parameter(scale.clone())
        self.swapped = True


def _sn(module: nn.Module, enabled: bool) -> nn.Module:
    return nn.utils.parametrizations.spectral_norm(module) if enabled else module


class GBlock(nn.Module):
    """Pre-activation residual block: conditional norm, ReLU, optional 2x
    nearest upsample, 3x3 conv, plus a (1x1 conv when widths differ) skip path.

    The skip path matters for fine-tuning: a frozen block whose normalization
    was swapped to instance statistics would otherwise pin the per-channel
    statistics of everything downstream.
    """

    def __init__(self, cin, cout, embed_dim, upsample, sn=False):
        super().__init__()
        self.upsample = upsample
        self.norm = ConditionalNorm(cin, embed_dim)
        self.conv = _sn(nn.Conv2d(cin, cout, 3, padding=1), sn)
        self.skip = _sn(nn.Conv2d(cin, cout, 1), sn) if cin != cout else None

    def forward(self, h, e):
        a = F.relu(self.norm(h, e))
        if self.upsample:
            a = F.interpolate(a, scale_factor=2, mode="nearest")
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        return self.conv(a) + (h if self.skip is None else self.skip(h))


class GeneratorStage(nn.Module):
    """One unit of progressive unfreezing: a conv block plus the layers it owns.

    The shallowest stage also owns the latent projection, the deepest one the
    output head.
    """

    def __init__(self, block: GBlock, stem: nn.Module | None = None, head: nn.Module | None = None,
                 stem_shape: tuple[int, int, int] | None = None):
        super().__init__()
        self.stem = stem
        self.stem_shape = stem_shape
        self.block = block
        self.head = head

    def forward(self, h, e):
        if self.stem is not None:
            h = self.stem(h).view(-1, *self.stem_shape)
        h = self.block(h, e)
        if self.head is not None:
            h = torch.tanh(self.head(F.relu(h)))
        return h


class Generator(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.class_embedding = nn.Embedding(arch.n_classes, arch.embed_dim)
        nn.init.normal_(self.class_embedding.weight, std=1.0)
        res = arch.block_resolutions()
        ch = arch.g_channels
        sn = arch.spectral_norm
        stages = []
        for j in range(arch.n_blocks):
            cin = ch[0] if j == 0 else ch[j - 1]
            up = j > 0 and res[j] > res[j - 1]
            block = GBlock(cin, ch[j], arch.embed_dim, up, sn)
            stem = head = shape = None
            if j == 0:
                b = arch.base_resolution
                stem = _sn(nn.Linear(arch.latent_dim, ch[0] * b * b), sn)
                shape = (ch[0], b, b)
            if j == arch.n_blocks - 1:
                head = _sn(nn.Conv2d(ch[j], 3, 3, padding=1), sn)
            stages.append(GeneratorStage(block, stem, head, shape))
        self.blocks = nn.ModuleList(stages)

    @property
    def norm_mode(self) -> str:
        swapped = [m.swapped for m in self.modules() if isinstance(m, ConditionalNorm)]
        return NORM_INSTANCE if all(swapped) else NORM_BATCH

    @property
    def latent_dim(self) -> int:
        return self.arch.latent_dim

    def block_parameters(self, index: int):
        """Parameters of block ``index`` (1-based, 1 = shallowest)."""
        return list(self.blocks[index - 1].parameters())

    def forward(self, z, y=None, embed=None):
        if embed is None:
            embed = self.class_embedding(y)
        h = z
        for stage in self.blocks:
            h = stage(h, embed)
        return h


class DBlock(nn.Module):
    def __init__(self, cin, cout, downsample, preactivate, sn=False):
        super().__init__()
        self.downsample = downsample
        self.preactivate = preactivate
        self.conv1 = _sn(nn.Conv2d(cin, cout, 3, padding=1), sn)
        self.conv2 = _sn(nn.Conv2d(cout, cout, 3, padding=1), sn)
        self.shortcut = _sn(nn.Conv2d(cin, cout, 1), sn) if (cin != cout or downsample) else None

    def forward(self, x):
        h = F.relu(x) if self.preactivate else x
        h = self.conv2(F.relu(self.conv1(h)))
        s = x
        if self.shortcut is not None:
            s = self.shortcut(s)
        if self.downsample:
            h = F.avg_pool2d(h, 2)
            s = F.avg_pool2d(s, 2)
        return h + s


class Discriminator(nn.Module):
    """Projection discriminator; each residual block output is a feature tap."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        sn = arch.spectral_norm
        blocks = []
        cin = 3
        res = arch.resolution
        for k, c in enumerate(arch.d_channels):
            down = res > 4
            blocks.append(DBlock(cin, c, down, preactivate=k > 0, sn=sn))
            cin = c
            res = res // 2 if down else res
        self.blocks = nn.ModuleList(blocks)
        self.linear = _sn(nn.Linear(cin, 1), sn)
        self.embed = _sn(nn.Embedding(arch.n_classes, cin), sn)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def features(self, x, taps=None):
        """Block outputs for the 1-based indices in ``taps`` (all blocks when None)."""
        K = len(self.blocks)
        taps = list(range(1, K + 1)) if taps is None else sorted(set(taps))
        for i in taps:
            if not 1 <= i <= K:
                raise DomainError(f"tap index {i} outside 1..{K}")
        out = []
        if not taps:
            return out
        h = x
        for k, block in enumerate(self.blocks[: taps[-1]], start=1):
            h = block(h)
            if k in taps:
                out.append(h)
        return out

    def forward(self, x, y):
        h = x
        for block in self.blocks:
            h = block(h)
        h = F.relu(h).sum(dim=(2, 3))
        return self.linear(h).squeeze(1) + (self.embed(y) * h).sum(dim=1)


def build_pair(arch: ArchConfig | dict | None = None, seed: int | None = 0):
    """Randomly initialized (Generator, Discriminator) for ``arch``, in eval mode."""
    if arch is None:
        arch = ArchConfig()
    elif isinstance(arch, dict):
        arch = ArchConfig.from_dict(arch)
    if seed is not None:
        torch.manual_seed(seed)
    G = Generator(arch).eval()
    D = Discriminator(arch).eval()
    return G, D


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _check_class(G: Generator, y) -> torch.Tensor:
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    if ((y < 0) | (y >= G.arch.n_classes)).any():
        raise DomainError(f"class index {y.tolist()} outside 0..{G.arch.n_classes - 1}")
    return y


def generate(G: Generator, z: torch.Tensor, y) -> torch.Tensor:
    """Image(s) in [-1, 1] for latent(s) ``z`` and class index(es) ``y``.

    A single latent of shape ``(d,)`` returns a ``(3, H, W)`` image; a batch
    ``(N, d)`` returns ``(N, 3, H, W)``. Normalization layers always use running
    (or instance) statistics, so the result does not depend on the batch.
    """
    z = torch.as_tensor(z)
    single = z.dim() == 1
    zb = z.reshape(1, -1) if single else z
    if zb.shape[-1] != G.arch.latent_dim:
        raise DomainError(f"latent has length {zb.shape[-1]}, expected {G.arch.latent_dim}")
    yb = _check_class(G, y)
    if yb.numel() == 1 and zb.shape[0] > 1:
        yb = yb.expand(zb.shape[0])
    if G.training:
        G.eval()
    zb = zb.to(next(G.parameters()).dtype)
    out = G(zb, yb)
    return out[0] if single else out


def discriminator_features(D: Discriminator, x: torch.Tensor, taps=None) -> list[torch.Tensor]:
    """Features of ``x`` at the requested discriminator blocks (1-based)."""
    x = torch.as_tensor(x)
    single = x.dim() == 3
    xb = x.unsqueeze(0) if single else x
    if xb.shape[1] != 3:
        raise DomainError(f"discriminator expects 3-channel images, got shape {tuple(x.shape)}")
    if D.training:
        D.eval()
    feats = D.features(xb, taps)
    return [f[0] for f in feats] if single else feats

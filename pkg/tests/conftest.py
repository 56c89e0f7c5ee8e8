"""Shared fixtures.

The trained toy prior and the full bench are expensive (minutes), so they are
built once and cached under ``$DGP_CACHE`` (default: ``.dgp_cache`` in the
repo). Cache entries are keyed by a hash of the package sources, so editing
the code invalidates them.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import pytest
import torch

import dgp
from dgp.gan_core import ArchConfig, build_pair

REPO = Path(__file__).resolve().parents[1]
SRC = Path(dgp.__file__).resolve().parent


def cache_root() -> Path:
    d = Path(os.environ.get("DGP_CACHE", REPO / ".dgp_cache"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def source_hash(files) -> str:
    h = hashlib.sha256()
    for f in sorted(files):
        h.update(Path(f).name.encode())
        h.update(Path(f).read_bytes())
    return h.hexdigest()[:12]


TINY = dict(n_blocks=3, n_classes=3, latent_dim=8, resolution=32, embed_dim=8,
            g_channels=(8, 8, 6), d_channels=(4, 6))
# six blocks, like the default, so every shipped preset fits
SMALL6 = dict(TINY, n_blocks=6, g_channels=(8, 8, 8, 6, 6, 4))


@pytest.fixture
def tiny_arch():
    return ArchConfig(**TINY)


@pytest.fixture
def tiny_pair(tiny_arch):
    G, D = build_pair(tiny_arch, seed=3)
    _randomize_conditioning(G)
    return G, D


def _randomize_conditioning(G, seed=11):
    """Fresh models have zero class-conditional gains and unit BN statistics;
    perturb both so tests exercise every path."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in G.named_parameters():
            if ".norm.gain." in name or ".norm.bias." in name:
                p.copy_(0.2 * torch.randn(p.shape, generator=gen))
        for name, b in G.named_buffers():
            if name.endswith("running_mean"):
                b.copy_(0.1 * torch.randn(b.shape, generator=gen))
            elif name.endswith("running_var"):
                b.copy_(0.5 + torch.rand(b.shape, generator=gen))
    return G


@pytest.fixture
def default_pair():
    G, D = build_pair(ArchConfig(), seed=5)
    _randomize_conditioning(G)
    return G, D


# ---------------------------------------------------------------- trained prior

def _prior_key() -> str:
    files = [SRC / n for n in ("gan_core.py", "pretrain.py", "corpus.py", "checkpoint.py")]
    return source_hash(files)


@pytest.fixture(scope="session")
def prior_path() -> Path:
    """Checkpoint of the default training run on the default corpus."""
    from dgp.corpus import make_corpus
    from dgp.pretrain import TrainConfig, train_to_file

    path = cache_root() / f"prior-{_prior_key()}.dgp"
    if not path.exists():
        logging.getLogger("dgp").info("training the toy prior (cached at %s)", path)
        train_to_file(make_corpus(), TrainConfig(), path)
    return path


@pytest.fixture(scope="session")
def prior(prior_path):
    from dgp.checkpoint import load_pair

    return load_pair(prior_path)


@pytest.fixture(scope="session")
def train_corpus():
    from dgp.corpus import make_corpus

    return make_corpus()


@pytest.fixture(scope="session")
def bench_result(prior_path):
    """Full default bench (20 images, all tasks, both methods), cached on disk."""
    from dgp import bench
    from dgp.checkpoint import file_digest

    key = source_hash(list(SRC.rglob("*.py")) + list((SRC / "presets").glob("*.json")))
    out = cache_root() / f"bench-{key}-{file_digest(prior_path)[:12]}"
    done = out / "bench.done.json"
    if not done.exists():
        res = bench.run_bench(prior_path, out, bench.BenchConfig())
        done.write_text(json.dumps({"wall_time": res["wall_time"]}))
    return out


# ---------------------------------------------------------------- acceptance lines

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

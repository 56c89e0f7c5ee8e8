"""Checkpoint archive: a zip holding ``manifest.json`` and raw little-endian float32 tensors."""
from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, IntegrityError, StateError
from .gan_core import NORM_BATCH, ArchConfig, Discriminator, Generator, build_pair

FORMAT_VERSION = "dgp-ckpt/1"


@dataclass
class Checkpoint:
    arch: ArchConfig
    tensors: dict[str, torch.Tensor]
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_modules(cls, G: Generator, D: Discriminator, **metadata) -> "Checkpoint":
        if G.norm_mode != NORM_BATCH:
            raise StateError("only generators with batch-norm statistics can be checkpointed")
        tensors = {}
        for prefix, module in (("generator", G), ("discriminator", D)):
            for name, t in module.state_dict().items():
                tensors[f"{prefix}.{name}"] = t.detach().clone()
        return cls(G.arch, tensors, dict(metadata))

    def state_dict(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def build(self) -> tuple[Generator, Discriminator]:
        """Instantiate the (generator, discriminator) pair in eval mode."""
        G, D = build_pair(self.arch, seed=None)
        for prefix, module in (("generator", G), ("discriminator", D)):
            own = module.state_dict()
            sd = self.state_dict(prefix)
            missing = set(own) - set(sd)
            extra = set(sd) - set(own)
            if missing or extra:
                raise CheckpointError(
                    f"{prefix} tensors do not match architecture: missing={sorted(missing)} "
                    f"unexpected={sorted(extra)}"
                )
            module.load_state_dict({k: v.to(own[k].dtype) for k, v in sd.items()})
        return G.eval(), D.eval()


def _entry(name: str) -> zipfile.ZipInfo:
    # fixed timestamp keeps archives byte-identical across runs
    return zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = {}
    blobs = {}
    for name, t in ckpt.tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        data = np.ascontiguousarray(arr).tobytes()
        entries[name] = {
            "shape": list(arr.shape),
            "dtype": str(t.dtype).replace("torch.", ""),
            "sha256": hashlib.sha256(data).hexdigest(),
        }
        blobs[name] = data
    manifest = {
        "format": FORMAT_VERSION,
        "arch": ckpt.arch.to_dict(),
        "seed": ckpt.metadata.get("seed"),
        "metadata": ckpt.metadata,
        "tensors": entries,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_entry("manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))
        for name, data in blobs.items():
            zf.writestr(_entry(f"tensors/{name}"), data)
    tmp.replace(path)
    return path


def read_manifest(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, OSError) as exc:
        raise IntegrityError(f"{path}: unreadable checkpoint manifest ({exc})") from exc


def load_checkpoint(path, expected_arch: ArchConfig | dict | None = None) -> Checkpoint:
    """Load and verify a checkpoint.

    ``expected_arch`` (optional) must equal the embedded descriptor; on mismatch
    a :class:`CheckpointError` naming both descriptors is raised.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != FORMAT_VERSION:
                raise CheckpointError(
                    f"{path}: unsupported format {manifest.get('format')!r}, expected {FORMAT_VERSION!r}"
                )
            arch = ArchConfig.from_dict(manifest["arch"])
            if expected_arch is not None:
                if isinstance(expected_arch, dict):
                    expected_arch = ArchConfig.from_dict(expected_arch)
                if expected_arch != arch:
                    raise CheckpointError(
                        f"{path}: architecture mismatch: checkpoint has {arch.to_dict()}, "
                        f"run expects {expected_arch.to_dict()}"
                    )
            tensors = {}
            for name, info in manifest["tensors"].items():
                data = zf.read(f"tensors/{name}")
                if hashlib.sha256(data).hexdigest() != info["sha256"]:
                    raise IntegrityError(f"{path}: checksum mismatch for tensor {name!r}")
                arr = np.frombuffer(data, dtype="<f4").reshape(info["shape"])
                tensors[name] = torch.from_numpy(arr.astype(np.float32)).to(getattr(torch, info["dtype"]))
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, json.JSONDecodeError, OSError, EOFError) as exc:
        raise IntegrityError(f"{path}: corrupted checkpoint archive ({exc})") from exc
    return Checkpoint(arch, tensors, manifest.get("metadata", {}))


def load_pair(path, expected_arch=None) -> tuple[Generator, Discriminator]:
    return load_checkpoint(path, expected_arch).build()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

"""Command-line entry point: ``dgp pretrain | run | bench | morph | jitter | transfer``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import bench as bench_mod
from . import color, engine, manipulation, metrics, tasks
from .checkpoint import load_pair, save_checkpoint
from .corpus import ToyCorpusSpec, make_corpus
from .degradations import Mask, from_config
from .errors import CheckpointError, ConfigurationError, DGPError, DomainError
from .imageio import contact_sheet, read_mask, to_display, write_png
from .presets import CONFIG_VERSION
from .pretrain import TrainConfig, pretrain_gan

log = logging.getLogger("dgp")

EXIT_CONFIG = 2
DEFAULT_CHECKPOINT = "toy_prior.dgp"


class CLIError(Exception):
    def __init__(self, msg, code=EXIT_CONFIG):
        super().__init__(msg)
        self.code = code


def cache_dir() -> Path:
    d = os.environ.get("DGP_CACHE")
    return Path(d) if d else Path.home() / ".cache" / "dgp"


def default_checkpoint() -> Path:
    return cache_dir() / DEFAULT_CHECKPOINT


def read_config(path) -> dict:
    """Parse a JSON config, reporting syntax errors with line and column."""
    path = Path(path)
    if not path.exists():
        raise CLIError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CLIError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    if not isinstance(cfg, dict):
        raise CLIError(f"{path}: top level must be a JSON object")
    version = cfg.get("version")
    if version != CONFIG_VERSION:
        raise CLIError(f"{path}: field 'version' must be {CONFIG_VERSION!r}, got {version!r}")
    return cfg


def _require_checkpoint(path) -> Path:
    path = Path(path) if path else default_checkpoint()
    if not path.exists():
        raise CLIError(f"checkpoint not found: {path}\n"
                       f"hint: create it with `dgp pretrain --out {path}` (or set DGP_CACHE)")
    return path


def _load_pair(path):
    try:
        return load_pair(path)
    except CheckpointError as e:
        raise CLIError(f"cannot load checkpoint {path}: {e}") from None


# ---------------------------------------------------------------- pretrain

def cmd_pretrain(args) -> int:
    cfg = {}
    if args.config:
        cfg = read_config(args.config).get("train", {})
    if args.iterations is not None:
        cfg["iterations"] = args.iterations
    cfg["seed"] = args.seed
    if args.checkpoint_every:
        cfg["checkpoint_every"] = args.checkpoint_every
    try:
        tcfg = TrainConfig.from_dict(cfg)
        tcfg.validate()
    except (TypeError, ConfigurationError) as e:
        raise CLIError(f"invalid training config: {e}") from None
    out = Path(args.out) if args.out else default_checkpoint()
    dataset = make_corpus(ToyCorpusSpec())
    ckpt = pretrain_gan(dataset, tcfg, state_dir=args.state_dir or out.parent / "train_state",
                        resume_from=args.resume, log_every=100)
    save_checkpoint(ckpt, out)
    print(f"checkpoint written to {out}")
    return 0


# ---------------------------------------------------------------- run

def _read_image(path, H) -> torch.Tensor:
    img = Image.open(path)
    if img.mode in ("L", "I", "I;16", "F"):
        arr = np.asarray(img.convert("L"), dtype=np.float32)[None] / 255.0
    else:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr))


def _mask_for(req, H, base_dir) -> Mask:
    m = req.mask
    if isinstance(m, str):
        p = Path(m)
        return Mask(read_mask(p if p.is_absolute() else base_dir / p), source={"path": m})
    if isinstance(m, dict):
        return from_config({"kind": "mask", **m}, H, base_dir)
    if isinstance(m, list):
        return Mask(np.asarray(m, dtype=np.uint8))
    raise ConfigurationError(f"task {req.name or req.task}: field 'mask' must be a path, box spec or list")


def execute_request(G, D, req: tasks.TaskRequest, base_dir: Path, mode=None) -> tasks.TaskOutput:
    H = G.arch.resolution
    p = Path(req.input)
    x = _read_image(p if p.is_absolute() else base_dir / p, H)
    sched = req.schedule()
    kw = dict(preset=sched, seed=req.seed, mode=mode)
    if req.task == "colorize":
        g = x if x.shape[0] == 1 else color.lightness(x.double()).float()
        return tasks.colorize(G, D, g, req.y, **kw)
    if req.task == "inpaint":
        return tasks.inpaint(G, D, x, _mask_for(req, H, base_dir), req.y, **kw)
    if req.task == "super_resolve":
        return tasks.super_resolve(G, D, x, req.factor, req.y, **kw)
    if req.task == "defend":
        return tasks.defend(G, D, x, **kw)
    if req.task == "hybrid":
        m = _mask_for(req, H, base_dir) if req.mask is not None else None
        return tasks.hybrid(G, D, x, m, req.factor or 1, req.y, **kw)
    raise ConfigurationError(f"unknown task {req.task!r}")


def cmd_run(args) -> int:
    cfg = read_config(args.config)
    base_dir = Path(args.config).resolve().parent
    entries = cfg.get("tasks")
    if not isinstance(entries, list) or not entries:
        raise CLIError(f"{args.config}: field 'tasks' must be a non-empty list")
    reqs = []
    for k, e in enumerate(entries):
        try:
            if "seed" not in e:
                e = {**e, "seed": args.seed if args.seed is not None else cfg.get("seed", 0)}
            req = tasks.TaskRequest.from_dict(e).validate()
            req.schedule()  # resolve preset names now, before any work
        except (ConfigurationError, TypeError) as err:
            raise CLIError(f"{args.config}: tasks[{k}]: {err}") from None
        reqs.append(req)
    ckpt = _require_checkpoint(args.checkpoint or cfg.get("checkpoint"))
    G, D = _load_pair(ckpt)
    out_root = Path(args.out or cfg.get("out") or "dgp_out")
    baseline = args.baseline or bool(cfg.get("baseline", False))
    failures, summary = 0, []
    for k, req in enumerate(reqs):
        name = req.name or f"{k:02d}_{req.task}"
        arms = [("dgp", None, out_root / name)]
        if baseline:
            arms.append(("z_only", "z_only", out_root / name / "baseline_z_only"))
        for method, mode, d in arms:
            try:
                out = execute_request(G, D, req, base_dir, mode)
            except (DGPError, ValueError, OSError) as err:
                print(f"task {name} ({method}) failed: {err}", file=sys.stderr)
                failures += 1
                continue
            tasks.save_task_output(out, d, request=req.to_dict())
            init_mse, final_mse = tasks.observation_mse(out.result)
            summary.append({"name": name, "task": req.task, "method": method,
                            "psnr": out.metrics.get("psnr"), "ssim": out.metrics.get("ssim"),
                            "mse": out.metrics.get("mse"), "runtime": out.result.runtime,
                            "observation_mse_final": final_mse})
            print(f"{name} [{method}]: {d}  observation mse {init_mse:.4g} -> {final_mse:.4g}")
    if summary:
        metrics.make_report(summary, out_root)
        (out_root / "summary.json").write_text(json.dumps(summary, indent=2))
    return 1 if failures else 0


# ---------------------------------------------------------------- bench

def cmd_bench(args) -> int:
    cfg = read_config(args.config).get("bench", {}) if args.config else {}
    if args.images is not None:
        cfg["n_images"] = args.images
    if args.tasks:
        cfg["tasks"] = args.tasks
    if args.save_runs:
        cfg["save_runs"] = True
    cfg["seed"] = args.seed
    try:
        bcfg = bench_mod.BenchConfig.from_dict(cfg)
    except TypeError as e:
        raise CLIError(f"invalid bench config: {e}") from None
    ckpt = _require_checkpoint(args.checkpoint)
    G, _ = _load_pair(ckpt)
    try:
        bcfg.validate(G.arch.n_classes)
    except ConfigurationError as e:
        raise CLIError(str(e)) from None
    res = bench_mod.run_bench(ckpt, args.out or "bench_out", bcfg, jobs=args.jobs)
    print(bench_mod.format_table(res["acceptance"]))
    print(f"summary: {res['summary']}  ({res['wall_time']:.0f} s)")
    return 0 if all(t["pass"] for t in res["acceptance"]) else 1


# ---------------------------------------------------------------- manipulation

def _load_run(d) -> engine.ReconstructionResult:
    p = Path(d)
    p = p / "reconstruction.pt" if p.is_dir() else p
    if not p.exists():
        raise CLIError(f"no reconstruction found at {p} (expected a `dgp run` result directory)")
    return engine.load_result(p)


def _write_frames(frames, out, prefix):
    out = Path(out)
    imgs = [to_display(f) for f in frames]
    for k, im in enumerate(imgs):
        write_png(im, out / f"{prefix}_{k:03d}.png")
    write_png(contact_sheet([imgs], pad=2), out / "grid.png")
    print(f"{len(imgs)} images written to {out}")


def cmd_morph(args) -> int:
    a, b = _load_run(args.a), _load_run(args.b)
    frames = manipulation.morph(a, b, args.steps, interp_class_embedding=not args.no_interp_class_embedding)
    _write_frames(frames, args.out, "morph")
    return 0


def cmd_jitter(args) -> int:
    r = _load_run(args.run)
    _write_frames(manipulation.jitter(r, args.sigma, args.n, seed=args.seed), args.out, "jitter")
    return 0


def cmd_transfer(args) -> int:
    r = _load_run(args.run)
    ys = range(r.generator.arch.n_classes) if args.y is None else [args.y]
    frames = [manipulation.transfer_category(r, y) for y in ys]
    _write_frames(frames, args.out, "class")
    return 0


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgp", description="Generative-prior image restoration on a toy GAN.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None, help=out_help)
        return sp

    sp = common(sub.add_parser("pretrain", help="train the toy GAN prior"), "checkpoint path")
    sp.add_argument("--iterations", type=int, default=None)
    sp.add_argument("--config", default=None, help="JSON config with a 'train' section")
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--state-dir", default=None)
    sp.add_argument("--resume", default=None, help="training state file to resume from")
    sp.set_defaults(func=cmd_pretrain)

    sp = common(sub.add_parser("run", help="run restoration tasks from a config"))
    sp.add_argument("--config", required=True)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--baseline", action="store_true", help="also run the z_only baseline")
    sp.set_defaults(func=cmd_run, seed=None)

    sp = common(sub.add_parser("bench", help="held-out benchmark and acceptance table"))
    sp.add_argument("--config", default=None, help="JSON config with a 'bench' section")
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--images", type=int, default=None)
    sp.add_argument("--tasks", nargs="+", default=None, choices=bench_mod.BENCH_TASKS)
    sp.add_argument("--save-runs", action="store_true")
    sp.set_defaults(func=cmd_bench)

    sp = common(sub.add_parser("morph", help="interpolate two reconstructions"))
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--steps", type=int, default=8)
    sp.add_argument("--no-interp-class-embedding", action="store_true")
    sp.set_defaults(func=cmd_morph)

    sp = common(sub.add_parser("jitter", help="perturb the latent of a reconstruction"))
    sp.add_argument("--run", required=True)
    sp.add_argument("--sigma", type=float, default=0.3)
    sp.add_argument("--n", type=int, default=8)
    sp.set_defaults(func=cmd_jitter)

    sp = common(sub.add_parser("transfer", help="re-render a reconstruction under other classes"))
    sp.add_argument("--run", required=True)
    sp.add_argument("--y", type=int, default=None, help="target class (default: all classes)")
    sp.set_defaults(func=cmd_transfer)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "out", None) is None and args.command in ("morph", "jitter", "transfer"):
        args.out = f"{args.command}_out"
    try:
        return args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DomainError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

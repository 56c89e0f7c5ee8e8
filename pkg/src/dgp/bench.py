"""The held-out toy benchmark: every task, DGP against the fixed-generator baseline.

A bench is a list of independent units (image, task, method). Each unit gets
its own seed derived from the bench seed, so results do not depend on the
order or the process in which units run.
"""
from __future__ import annotations

import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import color, manipulation, metrics, tasks
from .checkpoint import load_pair
from .corpus import ToyCorpusSpec, class_hue_signatures, make_corpus
from .defense import LinearProbe, sign_perturbation
from .degradations import Mask, lanczos_downsample
from .errors import ConfigurationError
from .presets import load_preset
from .imageio import contact_sheet, to_display, write_png

log = logging.getLogger(__name__)

BENCH_TASKS = ("reconstruct", "inpaint", "colorize", "sr_mse", "sr_d", "defend", "transfer")
METHODS = ("dgp", "z_only")
# tasks whose baseline arm is run; transfer only makes sense after fine-tuning
BASELINE_TASKS = ("reconstruct", "inpaint", "colorize", "sr_mse", "sr_d", "defend")
BENCH_PRESETS = {**tasks.DEFAULT_PRESETS, "sr_mse": "sr_mse", "sr_d": "sr_d", "transfer": "manipulation"}


@dataclass(frozen=True)
class BenchConfig:
    n_images: int = 20
    seed: int = 0
    suite_seed: int = 1234  # the training corpus uses 7
    tasks: tuple = BENCH_TASKS
    methods: tuple = METHODS
    sr_factor: int = 4
    mask_box: int = 12
    defense_eps: float = 8 / 255
    n_candidates: int = 500
    save_runs: bool = False
    stage_iterations: int | None = None  # smoke runs: cap every preset stage at this many steps

    def validate(self, n_classes: int):
        if self.n_images < 1:
            raise ConfigurationError("bench needs at least one image")
        if self.n_images % n_classes:
            raise ConfigurationError(f"n_images must be a multiple of the class count {n_classes}")
        for t in self.tasks:
            if t not in BENCH_TASKS:
                raise ConfigurationError(f"unknown bench task {t!r}; valid: {', '.join(BENCH_TASKS)}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigurationError(f"unknown method {m!r}; valid: {', '.join(METHODS)}")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        d = dict(d)
        d.pop("version", None)
        for k in ("tasks", "methods"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Unit:
    index: int  # image index in the suite
    task: str
    method: str
    seed: int
    image: torch.Tensor
    label: int
    observation: torch.Tensor | None = None
    extra: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return f"img{self.index:03d}"


def held_out_suite(cfg: BenchConfig, n_classes: int, resolution: int):
    spec = ToyCorpusSpec(n_classes, cfg.n_images // n_classes, resolution, cfg.suite_seed)
    return make_corpus(spec)


def unit_seed(seed: int, index: int, task: str) -> int:
    # both methods of a (image, task) pair share the seed, hence the same init candidates
    ss = np.random.SeedSequence([seed, index, BENCH_TASKS.index(task)])
    return int(ss.generate_state(1)[0] % (2**31))


def _as_rgb(x: torch.Tensor, size: int) -> torch.Tensor:
    x = x.expand(3, *x.shape[1:]) if x.shape[0] == 1 else x
    if x.shape[-1] != size:
        x = F.interpolate(x.unsqueeze(0), size=(size, size), mode="nearest")[0]
    return x


# ---------------------------------------------------------------- unit execution

_PAIRS: dict = {}


def _pair(ckpt_path):
    key = str(ckpt_path)
    if key not in _PAIRS:
        _PAIRS[key] = load_pair(ckpt_path)
    return _PAIRS[key]


def preset_for(name: str, cfg: BenchConfig):
    sched = load_preset(name)
    if cfg.stage_iterations:
        stages = tuple(replace(s, iterations=min(s.iterations, cfg.stage_iterations)) for s in sched.stages)
        sched = replace(sched, stages=stages)
    return sched


def run_unit(ckpt_path, unit: Unit, cfg: BenchConfig) -> dict:
    torch.set_num_threads(1)
    G, D = _pair(ckpt_path)
    x, y = unit.image, unit.label
    mode = "z_only" if unit.method == "z_only" else None
    preset = preset_for(BENCH_PRESETS[unit.task], cfg)
    kw = dict(seed=unit.seed, n_candidates=cfg.n_candidates, mode=mode, preset=preset)
    H = G.arch.resolution
    extra = {}
    if unit.task == "reconstruct":
        out = tasks.reconstruct(G, D, x, y, **kw)
        obs = x
    elif unit.task == "inpaint":
        mask = Mask.central_box(H, cfg.mask_box)
        out = tasks.inpaint(G, D, x, mask, y, reference=x, **kw)
        obs = out.observation
        out.metrics["psnr_full"] = out.metrics["psnr"]
        out.metrics["psnr"] = out.metrics.pop("psnr_masked")
    elif unit.task == "colorize":
        g = color.lightness(x.double()).float()
        out = tasks.colorize(G, D, g, y, reference=x, **kw)
        obs = g
        extra["closure_max_abs"] = float((color.lightness(out.image.double()) - g.double()).abs().max())
    elif unit.task in ("sr_mse", "sr_d"):
        x_lr = to_display(lanczos_downsample(x * 2 - 1, cfg.sr_factor))
        out = tasks.super_resolve(G, D, x_lr, cfg.sr_factor, y, reference=x, **kw)
        obs = x_lr
        relr = to_display(lanczos_downsample(out.result.x_star, cfg.sr_factor))
        extra["lr_consistency_mse"] = metrics.mse(relr * 2 - 1, x_lr * 2 - 1)
    elif unit.task == "defend":
        obs = unit.observation
        out = tasks.defend(G, D, obs, reference=x, **kw)
        traj = out.result.trajectory
        extra["stop_mse"] = [r["loss_mse"] for r in traj]
    elif unit.task == "transfer":
        out = tasks.reconstruct(G, D, x, y, **kw)
        y_new = unit.extra["y_new"]
        moved = to_display(manipulation.transfer_category(out.result, y_new))
        extra["y_new"] = y_new
        extra["transferred"] = moved
        obs = x
    else:  # pragma: no cover - validated earlier
        raise ConfigurationError(unit.task)

    init_mse, final_mse = tasks.observation_mse(out.result)
    totals = [r["loss_total"] for r in out.result.trajectory]
    row = {
        "name": unit.name, "task": unit.task, "method": unit.method, "label": y,
        "psnr": out.metrics.get("psnr"), "ssim": out.metrics.get("ssim"), "mse": out.metrics.get("mse"),
        "runtime": out.result.runtime, "iterations": len(out.result.trajectory),
        "stopped_early": out.result.stopped_early, "y_star": out.result.y,
        "obs_mse_initial": init_mse, "obs_mse_final": final_mse,
        "loss_head": statistics.median(totals[:10]), "loss_tail": statistics.median(totals[-10:]),
        "image": out.image, "observation": _as_rgb(obs, H), **extra,
    }
    if cfg.save_runs:
        row["output"] = out
    return row


# ---------------------------------------------------------------- bench driver

def build_units(cfg: BenchConfig, suite, probe: LinearProbe | None) -> list[Unit]:
    units = []
    C = suite.spec.n_classes
    adv = None
    if "defend" in cfg.tasks:
        adv = sign_perturbation(probe, suite.images, suite.labels, cfg.defense_eps)
    for i in range(len(suite)):
        x, y = suite.images[i], int(suite.labels[i])
        for task in cfg.tasks:
            methods = cfg.methods if task in BASELINE_TASKS else ("dgp",)
            for m in methods:
                if m not in cfg.methods:
                    continue
                u = Unit(i, task, m, unit_seed(cfg.seed, i, task), x, y)
                if task == "defend":
                    u.observation = adv[i]
                if task == "transfer":
                    rng = np.random.default_rng(unit_seed(cfg.seed, i, task))
                    u.extra["y_new"] = int((y + rng.integers(1, C)) % C)
                units.append(u)
    return units


def train_probe(dataset, seed: int = 0) -> LinearProbe:
    return LinearProbe(seed=seed).fit(dataset)


def _median(vals):
    vals = [v for v in vals if v is not None]
    return statistics.median(vals) if vals else float("nan")


def acceptance_table(rows: list[dict], suite, probe, cfg: BenchConfig, signatures) -> list[dict]:
    """Bench-level pass/fail checks, one dict per check."""
    def sel(task, method="dgp"):
        return [r for r in rows if r["task"] == task and r["method"] == method]

    table = []

    def add(name, value, threshold, ok):
        table.append({"check": name, "value": value, "threshold": threshold, "pass": bool(ok)})

    if {"reconstruct"} <= set(cfg.tasks) and "z_only" in cfg.methods:
        gap = _median([r["psnr"] for r in sel("reconstruct")]) - _median([r["psnr"] for r in sel("reconstruct", "z_only")])
        add("reconstruct median PSNR gain over z_only (dB)", gap, ">= 3", gap >= 3)
    if {"inpaint"} <= set(cfg.tasks) and "z_only" in cfg.methods:
        gap = _median([r["psnr"] for r in sel("inpaint")]) - _median([r["psnr"] for r in sel("inpaint", "z_only")])
        add("inpaint median masked PSNR gain over z_only (dB)", gap, ">= 1", gap >= 1)
    if {"sr_mse", "sr_d"} <= set(cfg.tasks):
        a, b = _median([r["psnr"] for r in sel("sr_mse")]), _median([r["psnr"] for r in sel("sr_d")])
        add("sr_mse minus sr_d median PSNR (dB)", a - b, ">= 0", a >= b)
    if "colorize" in cfg.tasks:
        rs = sel("colorize")
        worst = max(r["closure_max_abs"] for r in rs)
        add("colorize lightness closure, max abs", worst, "<= 2/255", worst <= 2 / 255)
        imgs = torch.stack([r["image"] for r in rs])
        hits = tasks.hue_assignment(imgs, [r["label"] for r in rs], signatures, seed=cfg.seed)
        acc = float(hits.float().mean())
        add("colorize hue-assignment accuracy", acc, ">= 0.70", acc >= 0.7)
    if "defend" in cfg.tasks:
        rs = sel("defend")
        defense = preset_for("defense", cfg)
        thr = defense.early_stop_mse
        ok = True
        for r in rs:
            m = r["stop_mse"]
            budget = defense.total_iterations
            first = next((k for k, v in enumerate(m) if v <= thr), None)
            if first is None:
                ok &= not r["stopped_early"] and len(m) == budget + 1
            else:
                ok &= r["stopped_early"] and first == len(m) - 1
        add("defend stops at first iteration with MSE <= 5e-3", float(ok), "all", ok)
        labels = [r["label"] for r in rs]
        adv = torch.stack([_adv_of(r) for r in rs])
        before = probe.error_rate(adv, labels)
        after = probe.error_rate(torch.stack([r["image"] for r in rs]), labels)
        add("probe error after defense minus before", after - before, "< 0", after < before)
    for t in BASELINE_TASKS:
        if t in cfg.tasks:
            rs = sel(t)
            ok = _median([r["obs_mse_final"] for r in rs]) < _median([r["obs_mse_initial"] for r in rs])
            add(f"{t} median observation MSE decreases", float(ok), "true", ok)
    if "transfer" in cfg.tasks:
        rs = sel("transfer")
        imgs = torch.stack([r["transferred"] for r in rs])
        ys = [r["y_new"] for r in rs]
        acc = float(tasks.hue_assignment(imgs, ys, signatures, seed=cfg.seed).float().mean())
        add("transfer hue moves to new class", acc, ">= 0.70", acc >= 0.7)
    return table


def _adv_of(row):
    return row["observation"]


def run_bench(ckpt_path, out_dir, cfg: BenchConfig = BenchConfig(), jobs: int = 1, probe=None,
              train_corpus=None) -> dict:
    """Run the suite, write ``summary.csv``, ``grid.png`` and ``acceptance.csv``."""
    t0 = time.perf_counter()
    G, _ = _pair(ckpt_path)
    cfg.validate(G.arch.n_classes)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suite = held_out_suite(cfg, G.arch.n_classes, G.arch.resolution)
    if train_corpus is None:
        train_corpus = make_corpus(ToyCorpusSpec(G.arch.n_classes, resolution=G.arch.resolution))
    if probe is None and "defend" in cfg.tasks:
        probe = train_probe(train_corpus, cfg.seed)
    signatures = class_hue_signatures(train_corpus)
    units = build_units(cfg, suite, probe)
    log.info("bench: %d units over %d images", len(units), len(suite))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(run_unit, [ckpt_path] * len(units), units, [cfg] * len(units)))
    else:
        rows = []
        for k, u in enumerate(units, 1):
            rows.append(run_unit(ckpt_path, u, cfg))
            log.info("unit %d/%d %s %s %s psnr=%.2f", k, len(units), u.name, u.task, u.method,
                     rows[-1]["psnr"] or float("nan"))

    if cfg.save_runs:
        for r in rows:
            tasks.save_task_output(r.pop("output"), out_dir / "runs" / r["task"] / r["method"] / r["name"])

    # summary.csv must be reproducible, so wall-clock time goes to timing.csv instead
    report_rows = []
    by_key = {(r["name"], r["task"], r["method"]): r for r in rows}
    for r in rows:
        rr = {k: r[k] for k in ("name", "task", "method", "psnr", "ssim", "mse")}
        rr["runtime"] = None
        if r["method"] == "dgp":
            base = by_key.get((r["name"], r["task"], "z_only"))
            rr["images"] = {"input": r["observation"], "baseline": base["image"] if base else None,
                            "dgp": r["image"], "reference": suite.images[int(r["name"][3:])]}
        report_rows.append(rr)
    rep = metrics.make_report(report_rows, out_dir)
    with open(out_dir / "timing.csv", "w") as f:
        f.write("name,task,method,iterations,runtime\n")
        for r in rows:
            f.write(f"{r['name']},{r['task']},{r['method']},{r['iterations']},{r['runtime']:.3f}\n")

    table = acceptance_table(rows, suite, probe, cfg, signatures)
    with open(out_dir / "acceptance.csv", "w") as f:
        f.write("check,value,threshold,pass\n")
        for t in table:
            f.write(f"\"{t['check']}\",{t['value']:.6f},\"{t['threshold']}\",{'PASS' if t['pass'] else 'FAIL'}\n")
    if "transfer" in cfg.tasks:
        tr = [[r["image"], r["transferred"]] for r in rows if r["task"] == "transfer"]
        write_png(contact_sheet(tr), out_dir / "transfer_grid.png")
    details = [{k: v for k, v in r.items() if not isinstance(v, torch.Tensor) and k != "stop_mse"} for r in rows]
    wall = time.perf_counter() - t0
    (out_dir / "bench.json").write_text(json.dumps(
        {"config": asdict(cfg), "units": details, "acceptance": table}, indent=1, default=str))
    log.info("bench finished in %.1f s", wall)
    return {"rows": rows, "acceptance": table, "summary": rep["summary"], "wall_time": wall,
            "out_dir": out_dir}


def format_table(table: list[dict]) -> str:
    w = max(len(t["check"]) for t in table)
    lines = [f"{'check':<{w}}  {'value':>12}  {'threshold':>10}  result"]
    for t in table:
        lines.append(f"{t['check']:<{w}}  {t['value']:>12.4f}  {t['threshold']:>10}  "
                     f"{'PASS' if t['pass'] else 'FAIL'}")
    return "\n".join(lines)

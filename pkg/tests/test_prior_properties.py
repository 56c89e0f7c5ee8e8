"""Properties that need the trained toy prior (and, for some, the cached bench)."""
import dataclasses
import json

import pytest
import torch

from dgp import bench, engine, manipulation, tasks
from dgp.color import rgb_to_lab
from dgp.degradations import Identity
from dgp.imageio import to_display

pytestmark = pytest.mark.slow


def hue_dispersion(images: torch.Tensor) -> torch.Tensor:
    """Chroma-weighted circular variance of per-pixel hue, one value per image.

    0 for a single hue, 1 for hues that cancel out.
    """
    ab = rgb_to_lab(images.double())[:, 1:]
    resultant = ab.mean(dim=(2, 3)).norm(dim=1)
    mean_chroma = ab.norm(dim=1).mean(dim=(1, 2))
    return 1 - resultant / mean_chroma.clamp_min(1e-9)


def test_loss_decreases_for_every_preset(bench_result):
    units = json.loads((bench_result / "bench.json").read_text())["units"]
    by_preset = {}
    for u in units:
        if u["method"] != "dgp":
            continue
        by_preset.setdefault(bench.BENCH_PRESETS[u["task"]], []).append(u)
    assert set(by_preset) == {"inpainting", "colorization", "sr_mse", "sr_d", "defense", "manipulation"}
    for preset, rows in by_preset.items():
        rows = rows[:10]
        bad = [r["name"] for r in rows if not r["loss_tail"] < r["loss_head"]]
        assert not bad, (preset, bad)


def test_morph_midpoint_stays_in_corpus_envelope(prior, train_corpus):
    G, D = prior
    sched = tasks._schedule("manipulation", None)
    sched = dataclasses.replace(sched, stages=tuple(dataclasses.replace(s, iterations=40) for s in sched.stages))
    res = []
    for i, y in ((0, 2), (1, 7)):
        x = train_corpus.images[train_corpus.labels == y][i] * 2 - 1
        res.append(engine.run_dgp(G, D, x.unsqueeze(0), Identity(), y, sched, seed=i, n_candidates=100))
    frames = manipulation.morph(res[0], res[1], 5)
    mid = to_display(frames[2])
    assert mid.min() >= 0 and mid.max() <= 1
    disp = hue_dispersion(train_corpus.images)
    lo, hi = float(disp.min()), float(disp.max())
    d_mid = float(hue_dispersion(mid.unsqueeze(0))[0])
    assert lo <= d_mid <= hi, (d_mid, lo, hi)


def test_class_conditional_colorization_differs(prior, train_corpus):
    G, D = prior
    from dgp.color import lightness, rgb_to_lab as lab

    x = train_corpus.images[5]
    g = lightness(x.double()).float()
    sched = tasks._schedule("colorization", None)
    sched = dataclasses.replace(sched, stages=sched.stages[:2])
    a = tasks.colorize(G, D, g, 0, preset=sched, n_candidates=50)
    b = tasks.colorize(G, D, g, 5, preset=sched, n_candidates=50)
    diff = (lab(a.image.double())[1:] - lab(b.image.double())[1:]).abs().max()
    assert float(diff) > 1.0

import csv
import math
import statistics

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from dgp import metrics
from dgp.errors import DomainError


def test_psnr_reference_values():
    x = torch.rand(3, 16, 16)
    assert metrics.psnr(x, x) == 99.0
    assert metrics.psnr(torch.zeros(3, 8, 8), torch.ones(3, 8, 8)) == pytest.approx(0.0)
    assert metrics.psnr(torch.zeros(3, 8, 8), torch.full((3, 8, 8), 0.5)) == pytest.approx(6.0206, abs=1e-4)


def test_psnr_shape_mismatch():
    with pytest.raises(DomainError):
        metrics.psnr(torch.zeros(3, 8, 8), torch.zeros(3, 8, 9))


def test_psnr_masked_uses_missing_region_only():
    x = torch.zeros(3, 8, 8)
    y = torch.zeros(3, 8, 8)
    m = torch.ones(8, 8)
    m[2:4, 2:4] = 0
    y[:, 2:4, 2:4] = 0.5
    y[:, 6:, 6:] = 1.0  # observed pixels do not count
    assert metrics.psnr_masked(x, y, m) == pytest.approx(10 * math.log10(4))
    with pytest.raises(DomainError):
        metrics.psnr_masked(x, y, torch.ones(8, 8))


def test_psnr_decreases_with_noise():
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(3, 16, 16, generator=gen) * 0.5 + 0.25
    noise = torch.rand(3, 16, 16, generator=gen) * 2 - 1
    vals = [metrics.psnr(x, x + a * noise) for a in (0.01, 0.05, 0.1, 0.2)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def _sk_ssim(x, y):
    return structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False)


def test_ssim_matches_reference_16x16():
    rng = np.random.default_rng(42)
    x = rng.random((16, 16))
    y = np.clip(x + 0.1 * rng.standard_normal((16, 16)), 0, 1)
    assert metrics.ssim(torch.from_numpy(x), torch.from_numpy(y)) == pytest.approx(_sk_ssim(x, y), abs=1e-6)


def test_ssim_rgb_uses_luma():
    rng = np.random.default_rng(1)
    x, y = rng.random((3, 20, 20)), rng.random((3, 20, 20))
    w = np.array([0.299, 0.587, 0.114])
    lx, ly = np.tensordot(w, x, 1), np.tensordot(w, y, 1)
    assert metrics.ssim(torch.from_numpy(x), torch.from_numpy(y)) == pytest.approx(_sk_ssim(lx, ly), abs=1e-6)


def test_ssim_basic_properties():
    x = torch.rand(3, 16, 16)
    assert metrics.ssim(x, x) == pytest.approx(1.0)
    assert metrics.ssim(x, 1 - x) < 1
    with pytest.raises(DomainError):
        metrics.ssim(torch.rand(10, 10), torch.rand(10, 10))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-0.2, 0.2))
def test_ssim_symmetric_and_shift_invariant(seed, shift):
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(16, 16, generator=gen, dtype=torch.float64) * 0.5 + 0.25
    y = torch.rand(16, 16, generator=gen, dtype=torch.float64) * 0.5 + 0.25
    s = metrics.ssim(x, y)
    assert s == pytest.approx(metrics.ssim(y, x), abs=1e-12)
    # contrast and structure terms are exactly shift invariant; the luminance
    # term moves slightly because it depends on the means themselves
    assert metrics.ssim(x + shift, y + shift) == pytest.approx(s, abs=5e-3)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_psnr_symmetric(seed):
    gen = torch.Generator().manual_seed(seed)
    x, y = torch.rand(3, 8, 8, generator=gen), torch.rand(3, 8, 8, generator=gen)
    assert metrics.psnr(x, y) == metrics.psnr(y, x)


def test_make_report(tmp_path):
    rows = [
        {"name": f"im{k}", "task": "t", "method": "dgp", "psnr": 20.0 + k, "ssim": 0.5 + 0.1 * k,
         "mse": 0.01 * (k + 1), "runtime": 1.0 + k,
         "images": {"input": torch.rand(3, 32, 32), "dgp": torch.rand(3, 32, 32),
                    "reference": torch.rand(3, 32, 32), "baseline": torch.rand(3, 32, 32)}}
        for k in range(3)
    ]
    rep = metrics.make_report(rows, tmp_path)
    with open(rep["summary"], newline="") as f:
        table = list(csv.reader(f))
    assert table[0] == list(metrics.SUMMARY_FIELDS)
    assert len(table) == 1 + 3 + 1
    data, footer = metrics.read_summary(rep["summary"])
    assert len(data) == 3
    assert float(footer["psnr"]) == pytest.approx(statistics.median([20.0, 21.0, 22.0]))
    assert float(footer["ssim"]) == pytest.approx(100 * statistics.median([0.5, 0.6, 0.7]))
    assert float(footer["mse"]) == pytest.approx(0.02)
    from PIL import Image
    grid = Image.open(rep["grid"])
    assert grid.size == (4 * 32, 3 * 32)


def test_make_report_empty(tmp_path):
    with pytest.raises(DomainError):
        metrics.make_report([], tmp_path)

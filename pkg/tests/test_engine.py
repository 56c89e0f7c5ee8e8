import math

import pytest
import torch

from dgp import engine
from dgp.degradations import Downsample, Gray, Identity, Mask, PerturbObserved
from dgp.engine import LossWeights, ReconstructionSchedule, Stage
from dgp.errors import ConfigurationError, DivergenceError, DomainError
from dgp.gan_core import generate
from dgp.presets import load_preset, preset_dict, preset_names


def sched(*stages, **kw):
    return ReconstructionSchedule(tuple(stages), **kw)


def st(blocks, iters=3, g_lr=1e-3, z_lr=1e-2, d=1.0, mse=1.0, emb=False):
    return Stage(blocks, iters, g_lr, z_lr, LossWeights(d, mse), emb)


def test_feature_loss_basic(tiny_pair):
    _, D = tiny_pair
    x, y = torch.rand(3, 32, 32) * 2 - 1, torch.rand(3, 32, 32) * 2 - 1
    assert engine.feature_matching_loss(D, x, x) == 0
    assert engine.feature_matching_loss(D, x, y) > 0
    with pytest.raises(DomainError):
        engine.feature_matching_loss(D, x, y[:, :16])
    with pytest.raises(DomainError):
        engine.feature_matching_loss(D, x, y, taps=[])


def test_total_loss_zero_d_weight_skips_discriminator(tiny_pair):
    G, D = tiny_pair
    z = torch.randn(G.arch.latent_dim)
    x_hat = torch.rand(1, 3, 32, 32) * 2 - 1
    with torch.no_grad():
        total, c = engine.total_loss(G, D, z, 0, x_hat, Identity(), LossWeights(0.0, 1.0))
    assert c["d"].item() == 0
    assert total.item() == pytest.approx((c["mse"] + 0.02 * c["zreg"]).item(), rel=1e-6)


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        sched(st(1), mode="warp")
    with pytest.raises(ConfigurationError):
        sched(st(2), st(1))  # progressive must not shrink
    with pytest.raises(ConfigurationError):
        sched(st(1), mode="z_only")  # z_only needs g_lr == 0
    with pytest.raises(ConfigurationError):
        sched()
    with pytest.raises(ConfigurationError):
        LossWeights(0, 0)
    s = sched(st(1), st(2))
    assert s.as_z_only().mode == "z_only"
    assert all(x.g_lr == 0 for x in s.as_z_only().stages)
    assert ReconstructionSchedule.from_dict(s.to_dict()) == s


def test_presets_verbatim_values():
    assert set(preset_names()) == {"colorization", "inpainting", "sr_mse", "sr_d", "defense", "manipulation"}
    col = load_preset("colorization")
    assert [s.blocks_num for s in col.stages] == [1, 2, 3, 4, 5]
    assert col.total_iterations == 1400
    sr = load_preset("sr_mse")
    assert (sr.stages[-1].weights.d_weight, sr.stages[-1].weights.mse_weight) == (0.1, 100)
    de = load_preset("defense")
    assert de.early_stop_mse == 5e-3
    assert (de.stages[1].g_lr, de.stages[1].z_lr) == (1e-4, 1e-4)
    assert all(s.tune_class_embedding for s in load_preset("inpainting").stages)
    man = load_preset("manipulation")
    assert len(man.stages) == 3 and man.stages[-1].blocks_num == 5
    assert all((s.weights.d_weight, s.weights.mse_weight) == (1, 0) for s in man.stages)
    with pytest.raises(ConfigurationError) as e:
        preset_dict("nope")
    assert "colorization" in str(e.value)


def test_init_latent_best_of_candidates(tiny_pair):
    G, D = tiny_pair
    z_true = torch.randn(G.arch.latent_dim)
    x_hat = generate(G, z_true, 1).unsqueeze(0)
    z0, y0, losses = engine.init_latent(G, D, x_hat, Identity(), 1, n_candidates=37, seed=4,
                                        batch_size=10, return_losses=True)
    assert losses.shape == (37,)
    k = int(torch.argmin(losses))
    gen = torch.Generator().manual_seed(4)
    zs = torch.randn(37, G.arch.latent_dim, generator=gen)
    assert torch.equal(z0, zs[k]) and y0 == 1
    # independent recomputation of one candidate's loss
    with torch.no_grad():
        ref = engine.feature_matching_loss(D, generate(G, zs[5], 1), x_hat[0])
    assert float(losses[5]) == pytest.approx(float(ref), rel=1e-5)
    # batching does not change the pick
    z1, _ = engine.init_latent(G, D, x_hat, Identity(), 1, n_candidates=37, seed=4, batch_size=37)
    assert torch.equal(z0, z1)


def test_init_latent_finds_true_preimage(tiny_pair):
    G, D = tiny_pair
    gen = torch.Generator().manual_seed(8)
    zs = torch.randn(25, G.arch.latent_dim, generator=gen)
    x_hat = generate(G, zs[17], 2).unsqueeze(0)
    z0, y0, losses = engine.init_latent(G, D, x_hat, Identity(), 2, n_candidates=25, seed=8,
                                        batch_size=7, return_losses=True)
    # brute force: the preimage has the smallest loss of the set
    assert int(torch.argmin(losses)) == 17 and torch.equal(z0, zs[17]) and y0 == 2
    assert float(losses[17]) <= 1e-5


def test_init_latent_samples_class_when_unknown(tiny_pair):
    G, D = tiny_pair
    x_hat = torch.rand(1, 3, 32, 32) * 2 - 1
    _, y = engine.init_latent(G, D, x_hat, Identity(), None, n_candidates=20)
    assert 0 <= y < G.arch.n_classes


def test_swap_preserves_output(tiny_pair):
    G, _ = tiny_pair
    z = torch.randn(G.arch.latent_dim)
    G2 = engine.swap_bn_to_in(G, z, 2)
    assert (generate(G2, z, 2) - generate(G, z, 2)).abs().max() <= 1e-4
    # a different latent is no longer tied to the running statistics
    z2 = torch.randn(G.arch.latent_dim) * 3
    assert not torch.allclose(generate(G2, z2, 2), generate(G, z2, 2), atol=1e-4)


def test_run_dgp_shapes_and_trajectory(tiny_pair):
    G, D = tiny_pair
    x_hat = generate(G, torch.randn(G.arch.latent_dim), 0).unsqueeze(0).detach()
    s = sched(st(1, 4), st(3, 5))
    res = engine.run_dgp(G, D, x_hat, Identity(), 0, s, n_candidates=8, reference=x_hat)
    assert res.x_star.shape == (3, 32, 32)
    assert len(res.trajectory) == 4 + 5 + 1
    assert [r["stage"] for r in res.trajectory[:4]] == [1] * 4
    assert len(res.snapshots) == 2
    # last row describes x_star
    with torch.no_grad():
        again, _ = engine.total_loss(res.generator, D, res.z_star, 0, x_hat, Identity(), s.stages[-1].weights)
    assert res.final["loss_total"] == pytest.approx(again.item(), rel=1e-5)
    assert torch.equal(res.x_star, generate(res.generator, res.z_star, 0))


def test_run_dgp_does_not_touch_input_generator(tiny_pair):
    G, D = tiny_pair
    before = {k: v.clone() for k, v in G.state_dict().items()}
    x_hat = torch.rand(1, 3, 32, 32) * 2 - 1
    engine.run_dgp(G, D, x_hat, Identity(), 0, sched(st(3, 3)), n_candidates=4)
    assert all(torch.equal(before[k], v) for k, v in G.state_dict().items())


def test_run_dgp_errors(tiny_pair):
    G, D = tiny_pair
    x_hat = torch.rand(1, 3, 32, 32) * 2 - 1
    with pytest.raises(ConfigurationError):
        engine.run_dgp(G, D, x_hat[:, :1], Identity(), 0, sched(st(1)), n_candidates=2)
    with pytest.raises(ConfigurationError):
        engine.run_dgp(G, D, x_hat, Identity(), 0, sched(st(4)), n_candidates=2)
    with pytest.raises(DomainError):
        engine.run_dgp(G, D, x_hat, PerturbObserved(torch.zeros(3, 32, 32), 0.0), 0, sched(st(1)))
    with pytest.raises(DomainError):
        engine.run_dgp(G, D, x_hat, Identity(), None, sched(st(1)), z0=torch.zeros(G.arch.latent_dim))


def test_run_dgp_divergence(tiny_pair):
    G, D = tiny_pair
    x_hat = torch.rand(1, 3, 32, 32) * 2 - 1
    s = sched(Stage(3, 50, 1e30, 1e30, LossWeights(1.0, 1.0)))
    with pytest.raises(DivergenceError) as e:
        engine.run_dgp(G, D, x_hat, Identity(), 0, s, n_candidates=2)
    assert hasattr(e.value, "last_healthy")


def test_early_stop_returns_current_image(tiny_pair):
    G, D = tiny_pair
    z = torch.randn(G.arch.latent_dim)
    x_hat = generate(G, z, 1).unsqueeze(0).detach()
    s = sched(st(3, 20, d=0.0), early_stop_mse=1e-3)
    res = engine.run_dgp(G, D, x_hat + 0.01, Identity(), 1, s, z0=z)
    assert res.stopped_early
    mses = [r["loss_mse"] for r in res.trajectory]
    assert mses[-1] <= 1e-3 and all(m > 1e-3 for m in mses[:-1])
    assert len(res.trajectory) == 1  # z_true already explains the shifted image within 1e-3


@pytest.mark.parametrize("phi", [Identity(), Gray(), Mask.central_box(32, 8), Downsample(4)])
def test_each_degradation_runs(tiny_pair, phi):
    G, D = tiny_pair
    x = generate(G, torch.randn(G.arch.latent_dim), 0).unsqueeze(0).detach()
    obs = phi.apply(x)
    res = engine.run_dgp(G, D, obs, phi, 0, sched(st(2, 6)), n_candidates=4)
    assert res.final["loss_total"] < res.initial["loss_total"]


def test_trajectory_and_result_persistence(tiny_pair, tmp_path):
    G, D = tiny_pair
    x_hat = torch.rand(1, 3, 32, 32) * 2 - 1
    res = engine.run_dgp(G, D, x_hat, Identity(), 2, sched(st(2, 3), norm_policy="in_swap"), n_candidates=3)
    p = engine.write_trajectory(res.trajectory, tmp_path / "t.csv")
    back = engine.read_trajectory(p)
    assert [r["iteration"] for r in back] == [r["iteration"] for r in res.trajectory]
    assert back[-1]["loss_mse"] == pytest.approx(res.final["loss_mse"])
    loaded = engine.load_result(engine.save_result(res, tmp_path / "r.pt"))
    assert torch.equal(generate(loaded.generator, loaded.z_star, loaded.y), res.x_star)

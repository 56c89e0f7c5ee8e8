import numpy as np
import pytest
import torch

from dgp.corpus import ToyCorpusSpec, make_corpus
from dgp.defense import LinearProbe, sign_perturbation
from dgp.errors import DomainError


@pytest.fixture(scope="module")
def probe_and_data():
    train = make_corpus(ToyCorpusSpec(n_classes=3, images_per_class=30))
    test = make_corpus(ToyCorpusSpec(n_classes=3, images_per_class=5, seed=99))
    return LinearProbe().fit(train), test


def test_probe_gradient_matches_finite_difference(probe_and_data):
    probe, test = probe_and_data
    x = test.images[:1].double()
    y = int(test.labels[0])
    g = probe.input_gradient(x, [y]).double().reshape(-1)

    def ce(v):
        p = probe.model.predict_proba(v.reshape(1, -1).numpy())[0]
        return -np.log(p[list(probe.model.classes_).index(y)])

    rng = np.random.default_rng(0)
    flat = x.reshape(-1)
    for i in rng.choice(flat.numel(), 5, replace=False):
        h = 1e-4
        e = torch.zeros_like(flat)
        e[i] = h
        fd = (ce(flat + e) - ce(flat - e)) / (2 * h)
        assert fd == pytest.approx(float(g[i]), rel=1e-3, abs=1e-7)


def test_sign_perturbation_bounded_and_harmful(probe_and_data):
    probe, test = probe_and_data
    adv = sign_perturbation(probe, test.images, test.labels, 16 / 255)
    assert (adv - test.images).abs().max() <= 16 / 255 + 1e-6
    assert adv.min() >= 0 and adv.max() <= 1
    assert probe.error_rate(adv, test.labels) >= probe.error_rate(test.images, test.labels)
    with pytest.raises(DomainError):
        sign_perturbation(probe, test.images, test.labels, 0.0)

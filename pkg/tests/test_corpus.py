import pytest
import torch

from dgp.corpus import ToyCorpusSpec, class_hue_signatures, load_corpus, make_corpus, save_corpus
from dgp.color import hue_distance
from dgp.errors import ConfigurationError


def test_deterministic_and_balanced():
    spec = ToyCorpusSpec(n_classes=4, images_per_class=3)
    a, b = make_corpus(spec), make_corpus(spec)
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
    assert a.images.shape == (12, 3, 32, 32)
    assert a.labels[:4].tolist() == [0, 1, 2, 3]
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_validation():
    with pytest.raises(ConfigurationError):
        make_corpus(ToyCorpusSpec(n_classes=1))
    with pytest.raises(ConfigurationError):
        make_corpus(ToyCorpusSpec(n_classes=2, images_per_class=1), resolution=64)


def test_hue_signatures_distinct():
    d = make_corpus(ToyCorpusSpec(images_per_class=20))
    sig = class_hue_signatures(d)
    gaps = hue_distance(sig[:, None], sig[None]) + torch.eye(len(sig)) * 10
    assert gaps.min() > 0.15


def test_save_load_roundtrip(tmp_path):
    d = make_corpus(ToyCorpusSpec(n_classes=2, images_per_class=2))
    back = load_corpus(save_corpus(d, tmp_path))
    assert torch.equal(back.labels, d.labels)
    assert (back.images - d.images).abs().max() <= 0.5 / 255 + 1e-6

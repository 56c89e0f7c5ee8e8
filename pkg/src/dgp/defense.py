"""Toy classifier and additive perturbations for the defense experiments.

The probe is a multinomial logistic regression on raw pixels. Being linear,
its input gradient is closed-form, so the sign perturbation below needs no
autograd and no attacker network.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression

from .corpus import ToyDataset
from .degradations import perturb_observed
from .errors import DomainError


class LinearProbe:
    """Pixel-space softmax classifier over toy classes."""

    def __init__(self, C: float = 0.05, max_iter: int = 500, seed: int = 0):
        self.model = LogisticRegression(C=C, max_iter=max_iter, random_state=seed)

    @staticmethod
    def _flat(x) -> np.ndarray:
        x = torch.as_tensor(x)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        return x.reshape(x.shape[0], -1).double().numpy()

    def fit(self, dataset: ToyDataset) -> "LinearProbe":
        self.model.fit(self._flat(dataset.images), dataset.labels.numpy())
        return self

    def predict(self, x) -> np.ndarray:
        return self.model.predict(self._flat(x))

    def error_rate(self, x, labels) -> float:
        return float(np.mean(self.predict(x) != np.asarray(labels)))

    def input_gradient(self, x, labels) -> torch.Tensor:
        """d(cross-entropy)/dx per image, shape of ``x`` (batched)."""
        xf = self._flat(x)
        p = self.model.predict_proba(xf)
        onehot = np.zeros_like(p)
        cls = list(self.model.classes_)
        onehot[np.arange(len(p)), [cls.index(int(c)) for c in labels]] = 1.0
        g = (p - onehot) @ self.model.coef_
        x = torch.as_tensor(x)
        return torch.from_numpy(g).float().reshape(x.shape if x.dim() == 4 else (1, *x.shape))


def sign_perturbation(probe: LinearProbe, x: torch.Tensor, labels, eps: float) -> torch.Tensor:
    """One-step sign-gradient perturbation of a [0, 1] image batch, clipped to range."""
    if eps <= 0:
        raise DomainError(f"eps must be positive, got {eps}")
    x = torch.as_tensor(x)
    batched = x.dim() == 4
    xb = x if batched else x.unsqueeze(0)
    delta = eps * probe.input_gradient(xb, labels).sign()
    out = torch.stack([perturb_observed(xi, di, eps) for xi, di in zip(xb, delta)])
    return out if batched else out[0]

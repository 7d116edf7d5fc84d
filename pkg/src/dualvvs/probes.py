"""Frozen-model task accuracy: linear-probe classification (IC) and RP prediction (RPP)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy.optimize import minimize
from scipy.special import log_softmax
from scipy.stats import binom

from .augment import sample_rp_batch

DEFAULT_L2 = 1e-4


@dataclass
class LinearProbe:
    weights: np.ndarray  # [n_classes, n]
    bias: np.ndarray  # [n_classes]
    trained_on: str = ""
    converged: bool = True
    n_iter: int = 0

    def logits(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.weights.shape[1]:
            raise ValueError(
                f"features have dimension {features.shape[-1]}, probe expects {self.weights.shape[1]}"
            )
        return features @ self.weights.T + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        # argmax returns the lowest index among ties
        return np.argmax(self.logits(features), axis=1)


def _objective(params, x, onehot, l2):
    n, d = x.shape
    c = onehot.shape[1]
    w = params[: c * d].reshape(c, d)
    b = params[c * d:]
    z = x @ w.T + b
    logp = log_softmax(z, axis=1)
    loss = -(onehot * logp).sum() / n + 0.5 * l2 * np.sum(w * w)
    resid = (np.exp(logp) - onehot) / n
    gw = resid.T @ x + l2 * w
    gb = resid.sum(axis=0)
    return loss, np.concatenate([gw.ravel(), gb])


def fit_linear_probe(features, labels, l2: float = DEFAULT_L2, n_classes: Optional[int] = None,
                     max_iter: int = 500, tol: float = 1e-6, trained_on: str = "") -> LinearProbe:
    """Multinomial logistic regression by L-BFGS with an L2 penalty on the weights."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError("features must be [count, n] with one label per row")
    if l2 < 0:
        raise ValueError("l2 must be >= 0")
    if np.unique(y).size < 2:
        raise ValueError("labels contain a single class; a classifier cannot be fit")
    c = int(n_classes if n_classes is not None else y.max() + 1)
    if x.shape[0] < c:
        raise ValueError(f"need at least {c} samples for {c} classes")
    onehot = np.zeros((x.shape[0], c))
    onehot[np.arange(x.shape[0]), y] = 1.0
    x0 = np.zeros(c * x.shape[1] + c)
    res = minimize(_objective, x0, args=(x, onehot, l2), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": tol, "maxfun": 4 * max_iter})
    converged = bool(res.success)
    if not converged:
        warnings.warn(f"linear probe did not converge after {res.nit} iterations: {res.message}",
                      RuntimeWarning, stacklevel=2)
    d = x.shape[1]
    return LinearProbe(res.x[: c * d].reshape(c, d).copy(), res.x[c * d:].copy(),
                       trained_on, converged, int(res.nit))


def ic_accuracy(probe: LinearProbe, features, labels) -> float:
    """Top-1 accuracy; ties resolve to the lowest class index."""
    labels = np.asarray(labels)
    pred = probe.predict(features)
    if pred.shape != labels.shape:
        raise ValueError("one label per feature row required")
    return float(np.mean(pred == labels))


@torch.no_grad()
def extract_features(model, images, batch_size: int = 256) -> np.ndarray:
    """``f(images)`` in evaluation mode, as float64 numpy, in input order."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    try:
        for start in range(0, len(images), batch_size):
            x = torch.as_tensor(images.get(slice(start, start + batch_size)), dtype=dtype)
            out.append(model.encode(x).double().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out)


@torch.no_grad()
def rp_predictions(model, images, rng: np.random.Generator, batch_size: int = 256,
                   resize_blocks: bool = True, samples_per_image: int = 1):
    """Predicted and true directions for quadrant pairs drawn like in training."""
    if getattr(model, "h", None) is None:
        raise ValueError("model has no relative-position head h")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    size = model.backbone_config.input_size if resize_blocks else None
    preds, truth = [], []
    try:
        for _ in range(samples_per_image):
            for start in range(0, len(images), batch_size):
                x = torch.as_tensor(images.get(slice(start, start + batch_size)))
                a, b, d = sample_rp_batch(x, rng, resize_to=size)
                fa = model.encode(a.to(dtype))
                fb = model.encode(b.to(dtype))
                preds.append(model.classify_rp(fa, fb).argmax(dim=1).numpy())
                truth.append(d.numpy())
    finally:
        model.train(was_training)
    return np.concatenate(preds), np.concatenate(truth)


def rpp_accuracy(model, images, rng: np.random.Generator, **kwargs) -> float:
    """Top-1 relative-position accuracy of the RP head on ``[f(a), f(b)]``, no further training."""
    pred, truth = rp_predictions(model, images, rng, **kwargs)
    return float(np.mean(pred == truth))


def binomial_interval(p: float, n: int, confidence: float = 0.99) -> tuple[float, float]:
    """Central interval for the observed fraction of ``n`` Bernoulli(``p``) trials."""
    lo, hi = binom.interval(confidence, n, p)
    return float(lo) / n, float(hi) / n

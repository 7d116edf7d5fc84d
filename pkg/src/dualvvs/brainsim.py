"""Neural predictivity of model layers.

Pipeline per layer: PLS regression from activations to repetition-averaged
responses on random train/test splits, per-neuron Pearson r on held-out
stimuli, division by the neuron's split-half noise ceiling, median over
neurons. A model's score for a region is its best layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import ImageSet, NeuralRecording

DEFAULT_COMPONENTS = 25
CEILING_EPS = 0.01
CORRECTED_CLIP = (-1.0, 1.5)
MAX_FEATURES = 4096


# --------------------------------------------------------------------------
# PLS


@dataclass
class PLSModel:
    n_components: int
    x_mean: np.ndarray
    y_mean: np.ndarray
    x_weights: np.ndarray  # W [features, A]
    x_loadings: np.ndarray  # P [features, A]
    y_loadings: np.ndarray  # C [targets, A]
    coef: np.ndarray  # B [features, targets]
    stopped_early: bool = False

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.coef.shape[0]:
            raise ValueError(f"X must have {self.coef.shape[0]} features")
        return (X - self.x_mean) @ self.coef + self.y_mean


def _dominant_direction(M: np.ndarray, start: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    """NIPALS inner loop: iterate ``w <- M M' w`` to the dominant left singular vector."""
    w = start / np.linalg.norm(start)
    for _ in range(max_iter):
        w_new = M @ (M.T @ w)
        norm = np.linalg.norm(w_new)
        if norm == 0:
            return w
        w_new /= norm
        if np.linalg.norm(w_new - w) < tol:
            return w_new
        w = w_new
    return w


def fit_pls(X, Y, n_components: int, tol: float = 1e-12, max_iter: int = 2000) -> PLSModel:
    """PLS2 regression by NIPALS with X-deflation.

    Stops early (``stopped_early=True``) once the remaining cross-covariance
    ``X_k' Y`` or the next score vector underflows; the components found so
    far are kept.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y must be 2-D with the same number of rows")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("X and Y must not contain NaN or inf")
    s, f = X.shape
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    if s <= n_components:
        raise ValueError(f"need more samples ({s}) than components ({n_components})")
    n_components = min(n_components, f)

    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xk = X - x_mean
    Yc = Y - y_mean
    M = Xk.T @ Yc
    scale = max(np.linalg.norm(M), np.finfo(float).tiny)
    x_scale = max(np.linalg.norm(Xk), np.finfo(float).tiny)
    W, P, C = [], [], []
    stopped = False
    for _ in range(n_components):
        if np.linalg.norm(M) <= 1e-12 * scale:
            stopped = True
            break
        # start from the target column with the most remaining covariance
        start = M[:, int(np.argmax(np.sum(M * M, axis=0)))]
        w = _dominant_direction(M, start, tol, max_iter)
        t = Xk @ w
        tt = t @ t
        if tt <= (1e-12 * x_scale) ** 2:
            stopped = True
            break
        p = Xk.T @ t / tt
        c = Yc.T @ t / tt
        Xk -= np.outer(t, p)
        M -= np.outer(p, t @ Yc)
        W.append(w)
        P.append(p)
        C.append(c)
    if not W:
        Wm = np.zeros((f, 0))
        coef = np.zeros((f, Y.shape[1]))
        return PLSModel(0, x_mean, y_mean, Wm, Wm.copy(), np.zeros((Y.shape[1], 0)), coef, True)
    Wm, Pm, Cm = np.array(W).T, np.array(P).T, np.array(C).T
    coef = Wm @ np.linalg.solve(Pm.T @ Wm, Cm.T)
    return PLSModel(Wm.shape[1], x_mean, y_mean, Wm, Pm, Cm, coef, stopped)


# --------------------------------------------------------------------------
# correlation and ceilings


def columnwise_pearson(A, B):
    """Pearson r per column plus a mask of degenerate (zero-variance) columns, which get r = 0."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    if A.ndim == 1:
        A, B = A[:, None], B[:, None]
    a = A - A.mean(axis=0)
    b = B - B.mean(axis=0)
    saa = np.sum(a * a, axis=0)
    sbb = np.sum(b * b, axis=0)
    sab = np.sum(a * b, axis=0)
    denom = np.sqrt(saa * sbb)
    degenerate = denom == 0
    r = np.divide(sab, denom, out=np.zeros_like(sab), where=~degenerate)
    return np.clip(r, -1.0, 1.0), degenerate


def pearson(a, b) -> float:
    """Centered correlation of two equal-length vectors; 0.0 if either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 3:
        raise ValueError("need at least 3 samples")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("inputs must be finite")
    r, _ = columnwise_pearson(a, b)
    return float(r[0])


def spearman_brown(r):
    r = np.asarray(r, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 2.0 * r / (1.0 + r)
    return np.where(r <= -1.0, -np.inf, out)


def noise_ceiling(recording: NeuralRecording, n_iterations: int = 30,
                  rng: Optional[np.random.Generator] = None, eps: float = CEILING_EPS) -> np.ndarray:
    """Per-neuron split-half reliability with Spearman-Brown correction.

    Each iteration splits the repetitions at random into two halves, correlates
    the half-means across stimuli and corrects to full length; the ceiling is
    the median over iterations, clamped to ``[eps, 1]``.
    """
    responses = np.asarray(recording.responses, dtype=np.float64)
    n_reps = responses.shape[2]
    if n_reps < 2:
        raise ValueError("noise ceiling needs at least 2 repetitions")
    if n_iterations < 1:
        raise ValueError("n_iterations must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    half = n_reps // 2
    corrected = np.empty((n_iterations, responses.shape[1]))
    for i in range(n_iterations):
        perm = rng.permutation(n_reps)
        m1 = responses[:, :, perm[:half]].mean(axis=2)
        m2 = responses[:, :, perm[half:]].mean(axis=2)
        r, _ = columnwise_pearson(m1, m2)
        corrected[i] = spearman_brown(r)
    ceiling = np.median(corrected, axis=0)
    return np.clip(ceiling, eps, 1.0)


def expected_ceiling(signal_var: float, noise_var: float, n_repetitions: int) -> float:
    """Spearman-Brown-corrected split-half reliability of a signal-plus-noise neuron.

    Half-means over ``n/2`` repetitions have noise variance ``2 noise_var / n``,
    so the half-split correlation is ``S / (S + 2 noise_var / n)`` and the
    corrected value is ``S / (S + noise_var / n)``.
    """
    r_half = signal_var / (signal_var + 2.0 * noise_var / n_repetitions)
    return float(2 * r_half / (1 + r_half))


# --------------------------------------------------------------------------
# scores


@dataclass(frozen=True)
class CVSpec:
    n_splits: int = 10
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.n_splits < 1:
            raise ValueError("n_splits must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1)")


@dataclass
class ScoreDistribution:
    center: float
    spread: float
    per_split: list

    def __post_init__(self):
        if not (math.isfinite(self.center) and math.isfinite(self.spread)):
            raise ValueError("score center and spread must be finite")

    @classmethod
    def from_splits(cls, values) -> "ScoreDistribution":
        v = np.asarray(values, dtype=np.float64)
        spread = float(np.std(v, ddof=1)) if v.size > 1 else 0.0
        return cls(float(np.median(v)), spread, [float(x) for x in v])

    def __str__(self):
        return f"{self.center:.4f} ± {self.spread:.4f}"


@dataclass
class BrainScoreReport:
    region: str
    per_layer: dict  # layer -> ScoreDistribution
    model_score: ScoreDistribution
    best_layer: str
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "region": self.region,
            "best_layer": self.best_layer,
            "model_score": asdict(self.model_score),
            "per_layer": {k: asdict(v) for k, v in self.per_layer.items()},
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "BrainScoreReport":
        per_layer = {k: ScoreDistribution(**v) for k, v in d["per_layer"].items()}
        return cls(d["region"], per_layer, ScoreDistribution(**d["model_score"]),
                   d["best_layer"], d.get("provenance", {}))


def random_projection(values: np.ndarray, n_out: int, seed: int) -> np.ndarray:
    """Seeded sparse random projection of the feature axis down to ``n_out``."""
    from sklearn.random_projection import SparseRandomProjection

    proj = SparseRandomProjection(n_components=n_out, random_state=seed, dense_output=True)
    return proj.fit_transform(values)


def cv_splits(n: int, cv: CVSpec) -> list:
    rng = np.random.default_rng(np.random.SeedSequence([cv.seed, n, cv.n_splits]))
    n_train = int(round(cv.train_fraction * n))
    n_train = min(max(n_train, 2), n - 3)
    if n_train < 2:
        raise ValueError(f"too few stimuli ({n}) for a train/test split")
    out = []
    for _ in range(cv.n_splits):
        perm = rng.permutation(n)
        out.append((np.sort(perm[:n_train]), np.sort(perm[n_train:])))
    return out


def layer_score(acts, recording: NeuralRecording, cv: CVSpec = CVSpec(),
                n_components: int = DEFAULT_COMPONENTS, ceiling: Optional[np.ndarray] = None,
                max_features: Optional[int] = MAX_FEATURES, ceiling_iterations: int = 30) -> ScoreDistribution:
    """Noise-corrected held-out predictivity of one layer for one recording.

    ``acts`` is an :class:`~dualvvs.model.ActivationMatrix` or a plain
    ``[stimuli, features]`` array in stimulus order.
    """
    X = np.asarray(getattr(acts, "values", acts), dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("activations must be [stimuli, features]")
    if X.shape[0] != recording.n_stimuli:
        raise ValueError(
            f"{X.shape[0]} activation rows for {recording.n_stimuli} recorded stimuli"
        )
    if max_features is not None and X.shape[1] > max_features:
        X = random_projection(X, max_features, cv.seed)
    Y = recording.mean_responses().astype(np.float64)
    if ceiling is None:
        rng = np.random.default_rng(np.random.SeedSequence([cv.seed, 1]))
        ceiling = noise_ceiling(recording, ceiling_iterations, rng)
    ceiling = np.asarray(ceiling, dtype=np.float64)
    if ceiling.shape != (recording.n_neurons,):
        raise ValueError("one ceiling value per neuron required")

    scores = []
    for train_idx, test_idx in cv_splits(X.shape[0], cv):
        a = min(n_components, len(train_idx) - 1, X.shape[1])
        pls = fit_pls(X[train_idx], Y[train_idx], a)
        pred = pls.predict(X[test_idx])
        r, _ = columnwise_pearson(pred, Y[test_idx])
        corrected = np.clip(r / ceiling, *CORRECTED_CLIP)
        scores.append(float(np.median(corrected)))
    return ScoreDistribution.from_splits(scores)


def model_score(per_layer: Mapping[str, ScoreDistribution], region: str = "",
                order: Optional[Sequence[str]] = None) -> BrainScoreReport:
    """Best layer by center; ties go to the shallower layer in ``order`` (default: mapping order)."""
    if not per_layer:
        raise ValueError("no layer scores given")
    names = list(order) if order is not None else list(per_layer)
    names = [n for n in names if n in per_layer] + [n for n in per_layer if n not in names]
    best = names[0]
    for n in names[1:]:
        if per_layer[n].center > per_layer[best].center:
            best = n
    return BrainScoreReport(region, {n: per_layer[n] for n in names}, per_layer[best], best)


def resize_stimuli(stimuli: ImageSet, size: int) -> np.ndarray:
    """Bilinear (antialiased) resize of the stimulus set to the model's input size."""
    import torch
    import torch.nn.functional as F

    x = torch.from_numpy(np.ascontiguousarray(stimuli.images))
    if x.shape[-1] == size:
        return x.numpy()
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False,
                         antialias=True).clamp(0, 1).numpy()


def score_model(model, recording: NeuralRecording, layers: Optional[Sequence[str]] = None,
                cv: CVSpec = CVSpec(), n_components: int = DEFAULT_COMPONENTS,
                max_features: Optional[int] = MAX_FEATURES, batch_size: int = 64) -> BrainScoreReport:
    """Score every requested layer of ``model.f`` against ``recording``."""
    if recording.stimuli is None:
        raise ValueError("recording has no stimulus images")
    layers = list(layers) if layers is not None else list(model.layer_names)
    stimuli = ImageSet(resize_stimuli(recording.stimuli, model.backbone_config.input_size))
    acts = model.record_activations(stimuli, layers, batch_size=batch_size)
    rng = np.random.default_rng(np.random.SeedSequence([cv.seed, 1]))
    ceiling = noise_ceiling(recording, 30, rng)
    per_layer = {
        name: layer_score(acts[name], recording, cv, n_components, ceiling, max_features)
        for name in layers
    }
    report = model_score(per_layer, recording.region, order=layers)
    report.provenance.update({"cv": asdict(cv), "n_components": n_components,
                              "max_features": max_features})
    return report


def layer_table_rows(reports: Mapping[str, BrainScoreReport]) -> list:
    """Rows ``[layer, V1, V1_spread, ...]`` for a layer x region table."""
    regions = list(reports)
    layers: list = []
    for rep in reports.values():
        for name in rep.per_layer:
            if name not in layers:
                layers.append(name)
    rows = []
    for name in layers:
        row = {"layer": name}
        for region in regions:
            dist = reports[region].per_layer.get(name)
            row[region] = "" if dist is None else f"{dist.center:.6f}"
            row[f"{region}_spread"] = "" if dist is None else f"{dist.spread:.6f}"
        rows.append(row)
    return rows

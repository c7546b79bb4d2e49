"""Linear probes on raw signals and extracted block features.

The SVM is a primal L2-regularized hinge-loss model fitted by deterministic
full-batch subgradient descent (Pegasos step sizes, bias as an augmented
constant feature), one-vs-rest for more than two classes, with C picked on a
stratified 80/20 holdout. The perceptron is a single affine + softmax layer
trained with exactly the classifier's protocol.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .blocks import LSTMFCN, weighted_cross_entropy
from .data import Dataset, class_weights, weight_vector
from .errors import DegenerateLabelsError, ParameterError
from .tensor import ParamSet, Rng, Tensor
from .training import BATCH, EPOCHS, TrainReport, fit

C_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
FEATURE_SETS = ("raw", "fcn", "branch", "concat")
PROBES = ("svm", "perceptron")


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.rows.ndim != 2 or len(self.rows) != len(self.labels):
            raise ParameterError(f"feature rows {self.rows.shape} do not match {len(self.labels)} labels")
        if not np.all(np.isfinite(self.rows)):
            raise ParameterError("feature matrix has non-finite entries")

    @property
    def width(self) -> int:
        return self.rows.shape[1]


@dataclass
class SvmModel:
    weights: np.ndarray          # one row per one-vs-rest problem (a single row when binary)
    biases: np.ndarray
    classes: np.ndarray
    C: float
    holdout_scores: dict = field(default_factory=dict)
    train_accuracy: float = float("nan")

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights.T + self.biases

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        if len(self.classes) == 2:
            return self.classes[(scores[:, 0] > 0).astype(int)]
        return self.classes[scores.argmax(axis=1)]

    def score(self, X, y) -> float:
        return float((self.predict(X) == np.asarray(y)).mean())

    @property
    def holdout_accuracy(self) -> float:
        return self.holdout_scores.get(self.C, float("nan"))


def _binary_hinge(X, y_pm, C, iters):
    """Minimize ``0.5|w|^2 + C sum hinge`` (bias folded into w) by averaged Pegasos."""
    n = len(X)
    Xa = np.hstack([X, np.ones((n, 1))])
    lam = 1.0 / (C * n)
    w = np.zeros(Xa.shape[1])
    avg = np.zeros_like(w)
    radius = 1.0 / np.sqrt(lam)
    tail = iters // 2
    for t in range(1, iters + 1):
        eta = 1.0 / (lam * t)
        active = y_pm * (Xa @ w) < 1.0
        grad = lam * w - (y_pm[active, None] * Xa[active]).sum(axis=0) / n
        w = w - eta * grad
        norm = np.linalg.norm(w)
        if norm > radius:
            w *= radius / norm
        if t > iters - tail:
            avg += w
    avg /= tail
    return avg[:-1], avg[-1]


def _fit_svm(X, y, C, iters) -> SvmModel:
    classes = np.unique(y)
    if len(classes) == 2:
        w, b = _binary_hinge(X, np.where(y == classes[1], 1.0, -1.0), C, iters)
        W, B = w[None, :], np.array([b])
    else:
        pairs = [_binary_hinge(X, np.where(y == c, 1.0, -1.0), C, iters) for c in classes]
        W, B = np.stack([p[0] for p in pairs]), np.array([p[1] for p in pairs])
    return SvmModel(W, B, classes, C)


def stratified_holdout(labels, fraction: float = 0.2, rng: Rng | None = None):
    """Split indices so each class keeps at least one training row."""
    rng = rng or Rng(0)
    labels = np.asarray(labels)
    train_idx, hold_idx = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = min(int(round(fraction * len(idx))), len(idx) - 1)
        hold_idx.extend(idx[:k])
        train_idx.extend(idx[k:])
    return np.sort(np.array(train_idx, dtype=int)), np.sort(np.array(hold_idx, dtype=int))


def train_linear_svm(f: FeatureMatrix, c_grid=C_GRID, seed: int = 0, iters: int = 500) -> SvmModel:
    """Tune C on a stratified 80/20 holdout, then refit on every training row.

    Ties in holdout accuracy go to the smaller C. The returned model records
    each candidate's holdout accuracy and the refit model's training accuracy.
    """
    if len(np.unique(f.labels)) < 2:
        raise DegenerateLabelsError("linear SVM needs at least two classes")
    if not c_grid:
        raise ParameterError("c_grid must be non-empty")
    tr, ho = stratified_holdout(f.labels, 0.2, Rng(seed))
    scores = {}
    for C in sorted(c_grid):
        if len(ho) == 0 or len(np.unique(f.labels[tr])) < 2:
            model = _fit_svm(f.rows, f.labels, C, iters)
            scores[C] = model.score(f.rows, f.labels)
        else:
            scores[C] = _fit_svm(f.rows[tr], f.labels[tr], C, iters).score(f.rows[ho], f.labels[ho])
    best_c = max(sorted(scores), key=lambda c: (scores[c], -c))
    model = _fit_svm(f.rows, f.labels, best_c, iters)
    model.holdout_scores = scores
    model.train_accuracy = model.score(f.rows, f.labels)
    return model


@dataclass
class Perceptron:
    params: ParamSet
    classes: int

    def logits(self, X) -> Tensor:
        return tc.matmul(Tensor(np.asarray(X, dtype=np.float64)), self.params["W"]) + self.params["b"]

    def predict(self, X) -> np.ndarray:
        return self.logits(X).data.argmax(axis=1)

    def score(self, X, y) -> float:
        return float((self.predict(X) == np.asarray(y)).mean())


def train_perceptron(train: FeatureMatrix, test: FeatureMatrix, num_classes: int | None = None,
                     epochs: int = EPOCHS, batch: int = BATCH, seed: int = 0) -> tuple[Perceptron, TrainReport]:
    """Affine + softmax probe trained with Adam, the plateau schedule and class weights.

    Like the classifier, the reported accuracy is the best test accuracy over
    epochs and the returned perceptron holds that epoch's parameters.
    """
    if train.width == 0:
        raise ParameterError("perceptron needs at least one feature column")
    if len(np.unique(train.labels)) < 2:
        raise DegenerateLabelsError("perceptron needs at least two classes")
    k = num_classes or int(max(train.labels.max(), test.labels.max()) + 1)
    rng = Rng(seed)
    limit = 1.0 / np.sqrt(train.width)
    params = ParamSet({"W": Tensor(rng.child("init").uniform(-limit, limit, (train.width, k)), True),
                       "b": Tensor(np.zeros(k), True)})
    model = Perceptron(params, k)
    weights = weight_vector(class_weights(train.labels), k)

    def loss_fn(xb, yb, _rng):
        return weighted_cross_entropy(model.logits(xb), yb, weights)

    report = fit(params, loss_fn, model.predict, train.rows, train.labels, test.rows, test.labels,
                 epochs=epochs, batch=batch, rng=rng.child("train"))
    params.load(report.best_params)
    return model, report


def feature_matrices(model: LSTMFCN, data: Dataset, which: str) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Train/test features for ``raw`` (normalized, padded series) or a model path."""
    out = []
    for split in ("train", "test"):
        X, y = data.arrays(split, model.dtype)
        if which == "raw":
            rows = X[:, 0, :]
        else:
            rows = np.concatenate([model.features(X[i:i + 256], which).data
                                   for i in range(0, len(X), 256)])
        out.append(FeatureMatrix(rows, y))
    return out[0], out[1]


def probe_suite(model: LSTMFCN, data: Dataset, c_grid=C_GRID, epochs: int = EPOCHS,
                batch: int = BATCH, seed: int = 0) -> dict:
    """Test accuracy of both probes on every feature set.

    Returns ``{(feature_set, probe): accuracy}`` with 8 entries plus
    ``widths`` recording each feature set's input width.
    """
    table, widths = {}, {}
    for which in FEATURE_SETS:
        tr, te = feature_matrices(model, data, which)
        widths[which] = tr.width
        svm = train_linear_svm(tr, c_grid, seed)
        table[(which, "svm")] = svm.score(te.rows, te.labels)
        _, report = train_perceptron(tr, te, data.num_classes, epochs, batch, seed)
        table[(which, "perceptron")] = report.best_accuracy
    return {"accuracy": table, "widths": widths}

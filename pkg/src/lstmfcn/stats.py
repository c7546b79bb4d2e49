"""Paired comparison statistics: Wilcoxon signed-rank, Dunn-Sidak, MPCE, win/tie/loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import ContractError, DegeneratePairsError, ParameterError

EXACT_MAX_N = 25


@dataclass(frozen=True)
class HypothesisTestResult:
    """Two-sided Wilcoxon outcome.

    ``statistic`` is the signed rank sum ``W+ - W-`` (negated when the two
    samples swap); ``w_plus`` is the positive-rank sum the p-value is built on.
    """

    statistic: float
    w_plus: float
    p_value: float
    n_effective: int
    method: str
    corrected_alpha: float
    reject: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def signed_ranks(x, y) -> np.ndarray:
    """Average-ranked |x - y| carrying the sign of the difference; zero pairs dropped."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 1:
        raise ContractError(f"paired samples must be equal-length 1-D, got {x.shape} and {y.shape}")
    # rounding keeps float noise in accuracy differences from splitting ties
    d = np.round(x - y, 12)
    d = d[d != 0]
    if len(d) == 0:
        raise DegeneratePairsError("all paired differences are zero; the signed-rank test is undefined")
    return np.sign(d) * rankdata(np.abs(d))


def exact_null_counts(ranks) -> np.ndarray:
    """Counts of sign assignments per value of ``2 * W+``.

    Ranks may be half-integers (averaged ties), so the distribution is built
    over doubled ranks. Entry ``s`` counts the subsets whose doubled rank sum is ``s``.
    """
    doubled = np.rint(2 * np.asarray(ranks, dtype=float)).astype(int)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    return counts


def _exact_p(abs_ranks, w_plus) -> float:
    counts = exact_null_counts(abs_ranks)
    total = sum(counts)
    s = int(round(2 * w_plus))
    lower = sum(counts[:s + 1])
    upper = sum(counts[s:])
    return min(1.0, 2 * min(lower, upper) / total)


def _normal_p(abs_ranks, w_plus) -> float:
    n = len(abs_ranks)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(abs_ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
    if var <= 0:
        return 1.0
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    return float(min(1.0, 2.0 * ndtr(-max(z, 0.0))))


def wilcoxon_signed_rank(x, y, alpha: float = 0.05, comparisons: int = 1,
                         exact_max_n: int = EXACT_MAX_N) -> HypothesisTestResult:
    """Two-sided signed-rank test of paired samples ``x`` and ``y``.

    Exact enumeration of the null distribution for up to ``exact_max_n``
    non-zero differences, otherwise the tie-corrected normal approximation
    with continuity correction. ``reject`` compares against the Dunn-Sidak
    alpha for ``comparisons`` tests.
    """
    sr = signed_ranks(x, y)
    abs_ranks = np.abs(sr)
    w_plus = float(sr[sr > 0].sum())
    w_minus = float(-sr[sr < 0].sum())
    n = len(sr)
    if n <= exact_max_n:
        p, method = _exact_p(abs_ranks, w_plus), "exact"
    else:
        p, method = _normal_p(abs_ranks, w_plus), "approximate"
    corrected = dunn_sidak(alpha, comparisons)
    return HypothesisTestResult(w_plus - w_minus, w_plus, p, n, method, corrected, p < corrected)


def dunn_sidak(alpha: float, m: int) -> float:
    """Per-comparison significance level ``1 - (1 - alpha)**(1/m)``."""
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    if int(m) != m or m < 1:
        raise ParameterError(f"number of comparisons must be a positive integer, got {m}")
    return 1.0 - (1.0 - alpha) ** (1.0 / m)


@dataclass
class ResultTable:
    """Per-dataset accuracies by model, plus the class count of every dataset."""

    rows: dict = field(default_factory=dict)           # dataset -> {model: accuracy}
    class_counts: dict = field(default_factory=dict)   # dataset -> number of classes

    def add(self, dataset: str, model: str, accuracy: float, num_classes: int | None = None):
        if not 0.0 <= accuracy <= 1.0:
            raise ContractError(f"accuracy {accuracy} for {dataset}/{model} outside [0, 1]")
        self.rows.setdefault(dataset, {})[model] = float(accuracy)
        if num_classes is not None:
            self.class_counts[dataset] = int(num_classes)

    @property
    def models(self) -> list:
        seen = []
        for accs in self.rows.values():
            seen.extend(m for m in accs if m not in seen)
        return seen

    def column(self, model: str) -> list:
        return [self.rows[d][model] for d in self.rows]


def mpce(table: ResultTable, model: str) -> float:
    """Mean over datasets of ``(1 - accuracy) / number_of_classes``."""
    if not table.rows:
        raise ContractError("MPCE of an empty table")
    pce = []
    for dataset, accs in table.rows.items():
        if dataset not in table.class_counts:
            raise ContractError(f"class count missing for dataset {dataset!r}")
        if model not in accs:
            raise ContractError(f"model {model!r} has no accuracy for dataset {dataset!r}")
        pce.append((1.0 - accs[model]) / table.class_counts[dataset])
    return math.fsum(pce) / len(pce)


@dataclass(frozen=True)
class WinTieLoss:
    wins: int
    ties: int
    losses: int
    mean_gain: float
    mean_drop: float

    def __iter__(self):
        return iter((self.wins, self.ties, self.losses))


def win_tie_loss(a, b, tol: float = 0.0) -> WinTieLoss:
    """Count ``a > b + tol``, ``|a - b| <= tol``, ``a < b - tol``.

    ``mean_gain`` is the average ``a - b`` over wins and ``mean_drop`` the
    average ``b - a`` over losses (NaN when there are none).
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ContractError(f"win_tie_loss needs equal lengths, got {len(a)} and {len(b)}")
    d = a - b
    win, loss = d > tol, d < -tol
    tie = ~(win | loss)
    gain = float(d[win].mean()) if win.any() else float("nan")
    drop = float(-d[loss].mean()) if loss.any() else float("nan")
    return WinTieLoss(int(win.sum()), int(tie.sum()), int(loss.sum()), gain, drop)

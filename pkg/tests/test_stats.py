import itertools
import math
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lstmfcn import stats as sx
from lstmfcn.errors import ContractError, DegeneratePairsError, ParameterError
from lstmfcn.stats import ResultTable


def average_ranks(values):
    # plain-python average ranking, independent of scipy
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = Fraction(i + j + 2, 2)
        i = j + 1
    return ranks


def brute_force_p(diffs):
    """Two-sided exact p by enumerating all 2^n sign patterns of the ranks."""
    d = [v for v in diffs if v != 0]
    ranks = average_ranks([abs(v) for v in d])
    observed = sum(r for r, v in zip(ranks, d) if v > 0)
    lower = upper = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        w = sum(r for r, s in zip(ranks, signs) if s)
        lower += w <= observed
        upper += w >= observed
    return min(Fraction(1), Fraction(2 * min(lower, upper), 2 ** len(d)))


def test_worked_example():
    res = sx.wilcoxon_signed_rank([1, 2, 3, 4, 5], [2, 3, 4, 5, 7])
    assert res.w_plus == 0 and res.p_value == 0.0625 and res.method == "exact" and res.n_effective == 5


def test_all_zero_differences():
    with pytest.raises(DegeneratePairsError):
        sx.wilcoxon_signed_rank([0.5, 0.7], [0.5, 0.7])


def test_length_mismatch():
    with pytest.raises(ContractError):
        sx.wilcoxon_signed_rank([1, 2], [1, 2, 3])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=10))
def test_swap_symmetry(pairs):
    x, y = map(list, zip(*pairs))
    if x == y:
        return
    a, b = sx.wilcoxon_signed_rank(x, y), sx.wilcoxon_signed_rank(y, x)
    assert a.p_value == b.p_value and a.statistic == -b.statistic
    assert 0 < a.p_value <= 1 and a.reject == (a.p_value < a.corrected_alpha)


@pytest.mark.parametrize("n", range(1, 13))
def test_exact_matches_enumeration_for_all_sign_patterns(n):
    # distinct magnitudes: every sign pattern
    for signs in itertools.product((-1, 1), repeat=n):
        d = [s * (k + 1) for s, k in zip(signs, range(n))]
        got = sx.wilcoxon_signed_rank(d, [0] * n).p_value
        assert abs(got - float(brute_force_p(d))) <= 1e-12
        if n > 8:
            break


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(-4, 4), min_size=1, max_size=12))
def test_exact_matches_enumeration_with_ties_and_zeros(d):
    if not any(d):
        return
    got = sx.wilcoxon_signed_rank(d, [0] * len(d)).p_value
    assert abs(got - float(brute_force_p(d))) <= 1e-12


def test_exact_sign_patterns_up_to_twelve_sampled():
    rng = random.Random(0)
    for n in range(9, 13):
        for _ in range(60):
            d = [rng.choice((-1, 1)) * (k + 1) for k in range(n)]
            assert abs(sx.wilcoxon_signed_rank(d, [0] * n).p_value - float(brute_force_p(d))) <= 1e-12


def test_normal_approximation_tracks_exact():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(15, 26))
        x, y = rng.normal(0, 1, n), rng.normal(0.3, 1, n)
        exact = sx.wilcoxon_signed_rank(x, y).p_value
        approx = sx.wilcoxon_signed_rank(x, y, exact_max_n=0).p_value
        worst = max(worst, abs(exact - approx))
    assert worst <= 0.02


def test_large_n_uses_approximation():
    rng = np.random.default_rng(1)
    res = sx.wilcoxon_signed_rank(rng.normal(0, 1, 40), rng.normal(0, 1, 40))
    assert res.method == "approximate" and 0 < res.p_value <= 1


def test_float_noise_does_not_break_ties():
    # 0.7-0.6, 0.2-0.1 and 0.3-0.4 differ only by float noise
    ranks = sx.signed_ranks([0.7, 0.2, 0.3], [0.6, 0.1, 0.4])
    assert ranks.tolist() == [2.0, 2.0, -2.0]


# -- Dunn-Sidak ------------------------------------------------------------------

def test_dunn_sidak_examples():
    assert sx.dunn_sidak(0.05, 1) == pytest.approx(0.05, abs=1e-15)
    assert abs(sx.dunn_sidak(0.05, 2) - 0.02532) <= 5e-5
    assert round(sx.dunn_sidak(0.05, 2), 3) == 0.025
    assert abs(sx.dunn_sidak(0.05, 3) - 0.01695) <= 5e-6


@pytest.mark.parametrize("bad", [(0.05, 0), (0.05, 1.5), (0.0, 2), (1.0, 2)])
def test_dunn_sidak_errors(bad):
    with pytest.raises(ParameterError):
        sx.dunn_sidak(*bad)


@given(st.floats(1e-4, 0.5), st.integers(2, 200))
def test_dunn_sidak_bounds_and_monotone(alpha, m):
    a = sx.dunn_sidak(alpha, m)
    assert 0 < a < alpha and sx.dunn_sidak(alpha, m + 1) < a


# -- MPCE ------------------------------------------------------------------------

def test_mpce_examples():
    t = ResultTable()
    t.add("a", "m", 1.0, 3)
    assert sx.mpce(t, "m") == 0.0
    t = ResultTable()
    t.add("a", "m", 0.9, 5)
    assert abs(sx.mpce(t, "m") - 0.02) <= 1e-15
    t.add("b", "m", 0.8, 2)
    assert abs(sx.mpce(t, "m") - 0.06) <= 1e-15


def test_mpce_missing_class_count():
    t = ResultTable()
    t.add("a", "m", 0.5)
    with pytest.raises(ContractError):
        sx.mpce(t, "m")


def test_mpce_row_order_invariant():
    rng = random.Random(0)
    rows = [(f"d{i}", rng.random(), rng.randint(2, 60)) for i in range(40)]
    ref = None
    for _ in range(100):
        rng.shuffle(rows)
        t = ResultTable()
        for name, acc, k in rows:
            t.add(name, "m", acc, k)
        v = sx.mpce(t, "m")
        ref = v if ref is None else ref
        assert v == ref


def test_result_table_rejects_bad_accuracy():
    with pytest.raises(ContractError):
        ResultTable().add("a", "m", 1.2, 2)


# -- win/tie/loss ----------------------------------------------------------------

def test_win_tie_loss_examples():
    assert tuple(sx.win_tie_loss([1, 2, 3], [1, 1, 4])) == (1, 1, 1)
    assert tuple(sx.win_tie_loss([0.5] * 4, [0.5] * 4)) == (0, 4, 0)
    with pytest.raises(ContractError):
        sx.win_tie_loss([1, 2], [1])


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), max_size=30), st.floats(0, 0.2))
def test_win_tie_loss_partition(pairs, tol):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    r = sx.win_tie_loss(a, b, tol)
    assert r.wins + r.ties + r.losses == len(pairs)
    assert math.isnan(r.mean_gain) or r.mean_gain > tol
    assert math.isnan(r.mean_drop) or r.mean_drop > tol

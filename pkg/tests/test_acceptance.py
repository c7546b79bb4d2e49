"""Acceptance criteria, one ``criterion`` marker each; the summary hook in
conftest prints a PASS/FAIL line per criterion at the end of the run."""
import itertools
import json
import math
import os
import random
import time
from fractions import Fraction

import numpy as np
import pytest

from lstmfcn import blocks as bk
from lstmfcn import stats
from lstmfcn import tensor as tc
from lstmfcn.blocks import LSTMFCN, BranchKind, BranchState, FcnConfig, ModelConfig
from lstmfcn.data import LabeledSeries, NormScheme, prepare, sine_square, znorm_dataset, znorm_per_sample
from lstmfcn.harness import runner
from lstmfcn.harness.spec import ExperimentSpec
from lstmfcn.probes import feature_matrices, train_perceptron
from lstmfcn.stats import ResultTable
from lstmfcn.tensor import RunningStats, Rng, Tensor, grad_check
from lstmfcn.training import ScheduleState, schedule_update, train

SEEDS = range(20)


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- gradient fidelity -----------------------------------------------------------

def _op_cases(r):
    cells, inputs = 3, 2
    x, h, m = T(r.normal(size=(2, inputs))), T(r.normal(size=(2, cells))), T(r.normal(size=(2, cells)))

    def w(g):
        return T(r.normal(size=(cells, g * cells))), T(r.normal(size=(inputs, g * cells)))
    W4, I4 = w(4)
    W3, I3 = w(3)
    W1, I1 = w(1)
    attn = {"Wq": T(r.normal(size=(cells, cells))), "Wk": T(r.normal(size=(cells, cells))),
            "b": T(r.normal(size=cells)), "v": T(r.normal(size=(cells, 1)))}
    names = list(attn)
    return {
        "conv1d_same": ([T(r.normal(size=(2, 2, 9))), T(r.normal(size=(3, 4, 2)))],
                        lambda i: tc.conv1d_same(i[0], i[1])),
        "batch_norm": ([T(r.normal(0, 2, (3, 2, 5))), T(r.normal(1, 0.3, 2)), T(r.normal(size=2))],
                       lambda i: tc.batch_norm(i[0], i[1], i[2], RunningStats.init(2), "train")),
        "sigmoid": ([T(r.normal(0, 2, 7))], lambda i: tc.sigmoid(i[0])),
        "tanh": ([T(r.normal(0, 2, 7))], lambda i: tc.tanh(i[0])),
        "relu": ([T(r.normal(0, 2, 7))], lambda i: tc.relu(i[0])),
        "softmax": ([T(r.normal(0, 2, (2, 5)))], lambda i: tc.softmax(i[0], axis=1)),
        "global_average_pool": ([T(r.normal(size=(2, 3, 6)))], lambda i: tc.global_average_pool(i[0])),
        "lstm_step": ([x, h, m, W4, I4],
                      lambda i: bk.lstm_step(i[0], BranchState(i[1], i[2]), {"W": i[3], "I": i[4]}).h),
        "gru_step": ([x, h, W3, I3], lambda i: bk.gru_step(i[0], i[1], {"W": i[2], "I": i[3]})),
        "rnn_step": ([x, h, W1, I1], lambda i: bk.rnn_step(i[0], i[1], {"W": i[2], "I": i[3]})),
        "dense_branch": ([x, T(r.normal(size=(inputs, cells))), T(r.normal(size=cells))],
                         lambda i: bk.dense_branch(i[0], {"W": i[1], "b": i[2]})),
        "attention_context": ([T(r.normal(size=(2, 4, cells))), h] + [attn[k] for k in names],
                              lambda i: bk.attention_context(i[0], i[1], dict(zip(names, i[2:])))),
    }


@pytest.mark.criterion("gradient fidelity (all ops + full LSTM-FCN loss, 20 seeds, <= 1e-4, < 60 s)")
def test_gradient_fidelity():
    start = time.perf_counter()
    worst = {}
    for seed in SEEDS:
        r = np.random.default_rng(seed)
        for name, (inputs, fn) in _op_cases(r).items():
            proj = Tensor(r.normal(size=fn(inputs).shape))
            worst[name] = max(worst.get(name, 0.0), grad_check(lambda i: (fn(i) * proj).sum(), inputs))
        cfg = ModelConfig(cells=3, input_length=12, num_classes=3, fcn=FcnConfig((4, 5, 3), (8, 5, 3)))
        model = LSTMFCN(cfg, Rng(seed).child("init"), np.float64)
        x = Rng(seed).normal(0, 1, (3, 1, 12))
        loss = lambda i: model.loss(x, [0, 1, 2], [1.0, 2.0, 0.5], "train", Rng(seed + 100))  # noqa: E731
        worst["lstm_fcn_loss"] = max(worst.get("lstm_fcn_loss", 0.0),
                                     grad_check(loss, list(model.params.tensors.values())))
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v <= 1e-4}
    assert not bad, f"relative error above 1e-4: {bad}"
    assert elapsed < 60, f"gradient checks took {elapsed:.1f}s"


# -- architecture law ------------------------------------------------------------

@pytest.mark.criterion("architecture law (1 step with shuffle, T steps without)")
@pytest.mark.parametrize("steps", [8, 32, 512])
def test_architecture_law(steps):
    x = Rng(0).normal(0, 1, (1, 1, steps))
    for kind in (BranchKind.LSTM, BranchKind.ALSTM, BranchKind.GRU, BranchKind.RNN):
        on = LSTMFCN(ModelConfig(branch=kind, input_length=steps), Rng(0), np.float64)
        on.forward(x)
        assert on.last_branch_steps == 1
        off = LSTMFCN(ModelConfig(branch=kind, input_length=steps, dimension_shuffle=False), Rng(0), np.float64)
        off.forward(x)
        assert off.last_branch_steps == steps


# -- schedule law ----------------------------------------------------------------

@pytest.mark.criterion("schedule law (1200 non-improving epochs, 1e-12 relative)")
def test_schedule_law():
    state = ScheduleState()
    for epoch in range(1200):
        schedule_update(state, 1.0, epoch)
        # the first epoch improves on +inf; every later one is flat
        k = epoch // 100
        expected = max(1e-3 * 2.0 ** (-k / 3.0), 1e-4)
        assert abs(state.lr - expected) <= 1e-12 * expected, (epoch, state.lr, expected)
    assert state.lr == 1e-4


# -- Wilcoxon --------------------------------------------------------------------

def _null_counts(n):
    # enumerate all 2^n sign assignments of ranks 1..n once
    counts = {}
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(k + 1 for k, s in enumerate(signs) if s)
        counts[w] = counts.get(w, 0) + 1
    return counts


def _tail_p(counts, n, observed):
    lo = sum(c for w, c in counts.items() if w <= observed)
    hi = sum(c for w, c in counts.items() if w >= observed)
    return min(1.0, float(Fraction(2 * min(lo, hi), 2 ** n)))


@pytest.mark.criterion("Wilcoxon exact p vs enumeration (n <= 12, 1e-12; worked example 0.0625; < 10 s)")
def test_wilcoxon_oracle():
    start = time.perf_counter()
    res = stats.wilcoxon_signed_rank([1, 2, 3, 4, 5], [2, 3, 4, 5, 7])
    assert res.w_plus == 0 and res.p_value == 0.0625
    checked = 0
    for n in range(1, 13):
        counts = _null_counts(n)
        for signs in itertools.product((-1, 1), repeat=n):
            d = [s * (k + 1) for k, s in enumerate(signs)]
            observed = sum(k + 1 for k, s in enumerate(signs) if s > 0)
            got = stats.wilcoxon_signed_rank(d, [0] * n).p_value
            assert abs(got - _tail_p(counts, n, observed)) <= 1e-12, (n, d)
            checked += 1
    assert checked == 2 ** 13 - 2
    assert time.perf_counter() - start < 10


# -- Dunn-Sidak ------------------------------------------------------------------

@pytest.mark.criterion("Dunn-Sidak (0.05, 2) = 0.02532 +- 5e-5")
def test_dunn_sidak():
    a = stats.dunn_sidak(0.05, 2)
    assert abs(a - 0.02532) <= 5e-5 and round(a, 3) == 0.025


# -- normalization ---------------------------------------------------------------

@pytest.mark.criterion("normalization laws (1000 series; train-only dataset statistics)")
def test_normalization_laws():
    r = np.random.default_rng(0)
    for i in range(1000):
        x = r.normal(r.uniform(-100, 100), r.uniform(0.01, 50), int(r.integers(2, 300)))
        out = znorm_per_sample(LabeledSeries.of(0, x)).values
        assert abs(out.mean()) <= 1e-12 and abs(out.std() - 1) <= 1e-9, i
    train = [LabeledSeries.of(0, r.normal(4, 3, 50)) for _ in range(20)]
    test = [LabeledSeries.of(0, r.normal(-40, 0.5, 50)) for _ in range(20)]
    pooled = np.concatenate([s.values for s in train])
    tr, te, mean, std = znorm_dataset(train, test)
    assert mean == pooled.mean() and std == pooled.std()
    for raw, out in zip(test, te):
        assert np.array_equal(out.values, (raw.values - pooled.mean()) / pooled.std())


# -- end-to-end synthetic ablation -------------------------------------------------

@pytest.fixture(scope="module")
def synthetic():
    return prepare(sine_square(100, 100, 64, 0.1, seed=0), NormScheme.PER_SAMPLE)


@pytest.fixture(scope="module")
def lstm_run(synthetic):
    start = time.perf_counter()
    model, report = train(ModelConfig(branch=BranchKind.LSTM, cells=8), synthetic, epochs=200, batch=128, seed=0)
    return model, report, time.perf_counter() - start


E2E = "end-to-end synthetic ablation (LSTM-FCN >= 0.95 in 200 epochs; 5 branches finite; concat >= branch probe)"


@pytest.mark.slow
@pytest.mark.criterion(E2E)
def test_lstm_fcn_reaches_accuracy(lstm_run):
    _, report, seconds = lstm_run
    assert report.best_accuracy >= 0.95 and seconds < 300


@pytest.mark.slow
@pytest.mark.criterion(E2E)
@pytest.mark.parametrize("kind", [k for k in BranchKind if k is not BranchKind.LSTM])
def test_every_branch_completes(kind, synthetic, lstm_run):
    _, report = train(ModelConfig(branch=kind, cells=8), synthetic, epochs=200, batch=128, seed=0)
    assert len(report.losses) == 200 and all(math.isfinite(v) for v in report.losses)
    assert all(math.isfinite(v) for v in lstm_run[1].losses)


@pytest.mark.slow
@pytest.mark.criterion(E2E)
def test_concat_probe_not_worse_than_branch(synthetic, lstm_run):
    model = lstm_run[0]
    acc = {}
    for which in ("branch", "concat"):
        tr, te = feature_matrices(model, synthetic, which)
        acc[which] = train_perceptron(tr, te, synthetic.num_classes, epochs=200, batch=128, seed=0)[1].best_accuracy
    assert acc["concat"] >= acc["branch"], acc


# -- MPCE ------------------------------------------------------------------------

@pytest.mark.criterion("MPCE worked examples and row-order invariance")
def test_mpce():
    t = ResultTable()
    t.add("a", "m", 1.0, 3)
    assert stats.mpce(t, "m") == 0.0
    t = ResultTable()
    t.add("a", "m", 0.9, 5)
    assert abs(stats.mpce(t, "m") - 0.02) <= 1e-15
    t.add("b", "m", 0.8, 2)
    assert abs(stats.mpce(t, "m") - 0.06) <= 1e-15
    rng = random.Random(1)
    rows = [(f"d{i}", rng.random(), rng.randint(2, 60)) for i in range(43)]
    values = set()
    for _ in range(100):
        rng.shuffle(rows)
        t = ResultTable()
        for name, a, k in rows:
            t.add(name, "m", a, k)
        values.add(stats.mpce(t, "m"))
    assert len(values) == 1


# -- determinism -----------------------------------------------------------------

def _synth(seed):
    return f"synthetic:sine_square?n_train=10&n_test=10&length=16&noise=0.1&seed={seed}"


@pytest.mark.criterion("determinism (accuracy, loss-trace and p-value fields byte-identical)")
def test_determinism(tmp_path):
    spec = ExperimentSpec(datasets=(_synth(0),), seed=3, model=ModelConfig(fcn=FcnConfig((4, 5, 3), (8, 5, 3))),
                          cells=(2, 4), epochs=4, batch=4, out=str(tmp_path / "a"))

    def fields(rec):
        return json.dumps({"selected": rec.selected,
                           "arms": [{k: a[k] for k in ("losses", "lrs", "test_accuracies", "best_accuracy")}
                                    for a in rec.arms]})
    a = runner.run_experiment(spec)
    b = runner.run_experiment(spec.replace(out=str(tmp_path / "b")))
    assert fields(a) == fields(b)
    suite = spec.replace(datasets=(_synth(0), _synth(1), _synth(2)), cells=(2,))
    s1 = runner.ablation_suite("normcompare", suite.replace(out=str(tmp_path / "s1")))
    s2 = runner.ablation_suite("normcompare", suite.replace(out=str(tmp_path / "s2")))
    keys = ("wilcoxon", "win_tie_loss", "corrected_alpha")
    assert json.dumps({k: s1[k] for k in keys}) == json.dumps({k: s2[k] for k in keys})
    assert open(s1["paths"]["table"]).read() == open(s2["paths"]["table"]).read()


# -- optional real-data check ----------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion("Chinatown >= 0.90 (optional; set LSTMFCN_CHINATOWN to the dataset directory)")
def test_chinatown(tmp_path):
    source = os.environ.get("LSTMFCN_CHINATOWN")
    if not source:
        pytest.skip("LSTMFCN_CHINATOWN not set; Chinatown files not supplied")
    spec = ExperimentSpec(datasets=(source,), seed=0, norm="dataset", epochs=2000, out=str(tmp_path))
    assert runner.run_experiment(spec).accuracy >= 0.90

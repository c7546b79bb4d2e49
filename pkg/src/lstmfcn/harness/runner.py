"""End-to-end experiments, ablation suites, activation export and comparisons."""
from __future__ import annotations

import contextlib
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .. import __version__
from ..blocks import BranchKind
from ..data import Dataset, prepare
from ..errors import BenchError, ContractError, DataError, DegeneratePairsError, ParameterError
from ..probes import FEATURE_SETS, PROBES, probe_suite
from ..stats import ResultTable, dunn_sidak, mpce, wilcoxon_signed_rank, win_tie_loss
from ..tensor import Rng, derive_seed
from ..training import evaluate, train
from . import plots
from .io import (RECORD_FORMAT, load_checkpoint, read_json, save_checkpoint, sha256_file,
                 write_csv, write_json)
from .spec import ExperimentSpec, load_source

log = logging.getLogger(__name__)

ALPHA = 0.05
SUITES = ("normcompare", "blockprobe", "dimshuffle", "substitute")
MATRIX_ROWS = ("LSTM", "GRU", "RNN")
MATRIX_COLS = ("GRU", "RNN", "DENSE")


@contextlib.contextmanager
def stage(name: str):
    """Tag any exception leaving the block with the pipeline stage it came from."""
    try:
        yield
    except BaseException as exc:
        if not hasattr(exc, "stage"):
            exc.stage = name
        raise


def slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", text).strip("_") or "dataset"


@dataclass
class ExperimentRecord:
    spec: dict
    label: str
    dataset: dict
    checksums: dict
    arms: list
    selected: dict
    probe: dict | None = None
    tool_version: str = __version__
    status: str = "ok"
    paths: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.selected["test_accuracy"]

    def to_dict(self) -> dict:
        return {"format": RECORD_FORMAT, "tool_version": self.tool_version, "status": self.status,
                "label": self.label, "spec": self.spec, "dataset": self.dataset,
                "checksums": self.checksums, "arms": self.arms, "selected": self.selected,
                "probe": self.probe, "paths": self.paths}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        if d.get("format") != RECORD_FORMAT:
            raise ContractError(f"unsupported record format {d.get('format')!r}")
        return cls(d["spec"], d["label"], d["dataset"], d["checksums"], d["arms"], d["selected"],
                   d.get("probe"), d.get("tool_version", ""), d.get("status", "ok"), d.get("paths", {}))


def _probe_to_json(result: dict) -> dict:
    return {"accuracy": {f"{f}/{p}": acc for (f, p), acc in result["accuracy"].items()},
            "widths": result["widths"]}


def load_prepared(source: str, norm) -> tuple[Dataset, list]:
    with stage("load"):
        raw, files = load_source(source)
    with stage("normalize"):
        return prepare(raw, norm), files


def run_experiment(spec: ExperimentSpec, write: bool = True) -> ExperimentRecord:
    """Load, normalize, pad, train every grid arm, keep the best, evaluate and persist."""
    if len(spec.datasets) != 1:
        raise ContractError("run_experiment takes a spec with exactly one dataset; use expand()")
    source = spec.datasets[0]
    data, files = load_prepared(source, spec.norm)
    dtype = np.dtype(spec.dtype)
    arms, models = [], []
    with stage("train"):
        for cells in spec.cells:
            seed = derive_seed(spec.seed, data.name, cells)
            model, report = train(spec.model.replace(cells=cells), data, spec.epochs, spec.batch, seed, dtype)
            arms.append(report.summary())
            models.append(model)
    best = max(range(len(arms)), key=lambda i: (arms[i]["best_accuracy"], -arms[i]["cells"]))
    model = models[best]
    with stage("evaluate"):
        X, y = data.arrays("test", dtype)
        acc, per_class = evaluate(model.predict, X, y)
    selected = {"cells": spec.cells[best], "test_accuracy": acc,
                "per_class_error": {str(k): v for k, v in per_class.items()},
                "pce": (1.0 - acc) / data.num_classes, "best_epoch": arms[best]["best_epoch"]}
    probe = None
    if spec.probe:
        with stage("probe"):
            probe = _probe_to_json(probe_suite(model, data, epochs=spec.epochs, batch=spec.batch,
                                               seed=derive_seed(spec.seed, data.name, "probe")))
    dataset_info = {"name": data.name, "source": source, "num_classes": data.num_classes,
                    "max_length": data.max_length, "n_train": len(data.train), "n_test": len(data.test),
                    "normalization": data.normalization.value,
                    "train_mean": data.train_mean, "train_std": data.train_std}
    record = ExperimentRecord(spec.to_dict(), spec.label, dataset_info,
                              {str(p): sha256_file(p) for p in files}, arms, selected, probe)
    if write:
        with stage("write"):
            _persist(record, model, spec, data)
    return record


def _persist(record: ExperimentRecord, model, spec: ExperimentSpec, data: Dataset):
    out = Path(spec.out)
    cells = "-".join(str(c) for c in spec.cells)
    stem = f"{slug(record.label)}__{slug(data.name)}__{spec.norm.value.lower()}__c{cells}__s{spec.seed}"
    ckpt = out / f"{stem}.npz"
    record.paths = {"record": str(out / f"{stem}.json"), "checkpoint": str(ckpt),
                    "curves": str(out / f"{stem}_curves.png")}
    save_checkpoint(ckpt, model, {"dataset_source": record.dataset["source"], "norm": spec.norm.value,
                                  "label": record.label, "seed": spec.seed})
    arm = next(a for a in record.arms if a["cells"] == record.selected["cells"])
    if arm["losses"]:
        plots.training_curves(record.paths["curves"], arm["losses"], arm["lrs"], arm["test_accuracies"],
                              f"{record.label} on {data.name} ({record.selected['cells']} cells)")
    else:
        record.paths.pop("curves")
    write_json(record.paths["record"], record.to_dict())


def expand(spec: ExperimentSpec) -> list:
    """One single-dataset spec per (dataset, repeat); repeats get derived seeds."""
    out = []
    for source in spec.datasets:
        for r in range(spec.repeat):
            seed = spec.seed if r == 0 else derive_seed(spec.seed, "repeat", r)
            out.append(spec.replace(datasets=(source,), seed=seed, repeat=1))
    return out


def _execute(spec_dict: dict) -> dict:
    spec = ExperimentSpec.from_dict(spec_dict)
    try:
        return run_experiment(spec).to_dict()
    except BenchError as exc:
        log.warning("experiment %s on %s failed: %s", spec.label, spec.datasets[0], exc)
        return {"status": "failed", "error": str(exc), "stage": getattr(exc, "stage", "unknown"),
                "label": spec.label, "spec": spec.to_dict(), "exit_code": exc.exit_code}


def run_many(specs: list, workers: int = 1) -> list:
    """Run specs, in worker processes when ``workers > 1``; results keep input order."""
    payload = [s.to_dict() for s in specs]
    if workers <= 1 or len(payload) <= 1:
        return [_execute(p) for p in payload]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_execute, payload))


# -- suites ----------------------------------------------------------------------

def suite_jobs(kind: str, spec: ExperimentSpec) -> list:
    """The experiment grid each suite runs, as single-dataset specs."""
    if kind not in SUITES:
        raise ParameterError(f"unknown suite {kind!r}; expected one of {SUITES}")
    out = Path(spec.out) / kind / "records"
    jobs = []
    for base in expand(spec.replace(out=str(out))):
        if kind == "normcompare":
            jobs += [base.replace(norm=n) for n in ("PER_SAMPLE", "DATASET")]
        elif kind == "blockprobe":
            jobs.append(base.replace(probe=True))
        elif kind == "dimshuffle":
            for c in spec.cells:
                for flag in (True, False):
                    jobs.append(base.replace(cells=(c,), model=base.model.replace(dimension_shuffle=flag),
                                             name=""))
        else:
            for c in spec.cells:
                for kindname in BranchKind:
                    jobs.append(base.replace(cells=(c,), model=base.model.replace(
                        branch=kindname, dimension_shuffle=True), name=""))
    return jobs


def _dataset_key(rec: dict) -> str:
    if rec.get("status") == "ok":
        return rec["dataset"]["name"]
    return rec["spec"]["datasets"][0]


def _safe_wilcoxon(a, b, comparisons: int):
    try:
        return wilcoxon_signed_rank(a, b, ALPHA, comparisons).to_dict()
    except (DegeneratePairsError, ContractError) as exc:
        return {"undefined": str(exc)}


def _wtl(a, b) -> dict:
    r = win_tie_loss(a, b) if len(a) else None
    if r is None:
        return {"wins": 0, "ties": 0, "losses": 0, "mean_gain": None, "mean_drop": None}
    nan = lambda v: None if math.isnan(v) else v  # noqa: E731
    return {"wins": r.wins, "ties": r.ties, "losses": r.losses,
            "mean_gain": nan(r.mean_gain), "mean_drop": nan(r.mean_drop)}


def best_counts(rows: list, columns: list) -> list:
    """Per column, how many rows hold the row maximum (ties are shared)."""
    counts = [0] * len(columns)
    for row in rows:
        vals = [row[c] for c in columns]
        finite = [v for v in vals if v is not None and not math.isnan(v)]
        if not finite:
            continue
        top = max(finite)
        for i, v in enumerate(vals):
            if v is not None and v == top:
                counts[i] += 1
    return counts


def ablation_suite(kind: str, spec: ExperimentSpec, workers: int = 1) -> dict:
    """Run one ablation suite and write its CSV/JSON/PNG reports.

    Failed experiments are listed with their stage and excluded from the
    statistics; the rest of the suite still runs.
    """
    jobs = suite_jobs(kind, spec)
    records = run_many(jobs, workers)
    out = Path(spec.out) / kind
    failures = [{"label": r["label"], "dataset": _dataset_key(r), "stage": r["stage"], "error": r["error"]}
                for r in records if r.get("status") != "ok"]
    report = {"kind": kind, "experiments": len(records), "failed": failures,
              "records": [r.get("paths", {}).get("record") for r in records]}
    report.update(_REDUCERS[kind](records, out))
    write_json(out / f"{kind}_summary.json", report)
    report["summary_path"] = str(out / f"{kind}_summary.json")
    return report


def _ok(records):
    return [r for r in records if r.get("status") == "ok"]


def _reduce_normcompare(records, out: Path) -> dict:
    by_ds = {}
    for r in records:
        norm = r["spec"]["norm"]
        entry = by_ds.setdefault(_dataset_key(r), {"num_classes": None})
        if r.get("status") == "ok":
            entry[norm] = r["selected"]["test_accuracy"]
            entry["num_classes"] = r["dataset"]["num_classes"]
    rows, a_ds, a_ps = [], [], []
    for name, e in by_ds.items():
        ok = "PER_SAMPLE" in e and "DATASET" in e
        rows.append([name, e["num_classes"], e.get("PER_SAMPLE"), e.get("DATASET"), "ok" if ok else "failed"])
        if ok:
            a_ps.append(e["PER_SAMPLE"])
            a_ds.append(e["DATASET"])
    write_csv(out / "normcompare.csv", ["dataset", "num_classes", "acc_sample", "acc_dataset", "status"], rows)
    paths = {"table": str(out / "normcompare.csv")}
    if a_ds:
        paths["figure"] = str(plots.paired_scatter(out / "normcompare.png", a_ps, a_ds,
                                                   "per-sample z-norm", "dataset z-norm"))
    return {"corrected_alpha": dunn_sidak(ALPHA, 2),
            "wilcoxon": _safe_wilcoxon(a_ds, a_ps, 2) if a_ds else {"undefined": "no completed pairs"},
            "win_tie_loss": _wtl(a_ds, a_ps), "paths": paths}


def _reduce_blockprobe(records, out: Path) -> dict:
    cols = [f"{f}_{p}" for p in PROBES for f in FEATURE_SETS]
    rows, table = [], {}
    for r in _ok(records):
        acc = r["probe"]["accuracy"]
        row = {f"{f}_{p}": acc[f"{f}/{p}"] for p in PROBES for f in FEATURE_SETS}
        rows.append((r["dataset"]["name"], row))
        for f in FEATURE_SETS:
            for p in PROBES:
                table.setdefault((f, p), []).append(acc[f"{f}/{p}"])
    paths = {}

    def emit(name, columns):
        body = [[ds] + [row[c] for c in columns] for ds, row in rows]
        counts = best_counts([row for _, row in rows], columns)
        write_csv(out / name, ["dataset"] + columns, body + [["Count"] + counts])
        return str(out / name)

    paths["table"] = emit("probe_table.csv", cols)
    paths["svm_table"] = emit("svm_table.csv", ["raw_svm", "branch_svm", "fcn_svm"])
    paths["perceptron_table"] = emit("perceptron_table.csv",
                                     ["branch_perceptron", "fcn_perceptron", "concat_perceptron"])
    if table:
        paths["figure"] = str(plots.probe_bars(out / "blockprobe.png", table, "probe accuracy"))
    concat = table.get(("concat", "perceptron"), [])
    tests = {}
    for other in ("fcn", "branch"):
        ref = table.get((other, "perceptron"), [])
        tests[f"concat_vs_{other}"] = {"wilcoxon": _safe_wilcoxon(concat, ref, 2) if concat else
                                       {"undefined": "no completed probes"}, "win_tie_loss": _wtl(concat, ref)}
    return {"corrected_alpha": dunn_sidak(ALPHA, 2), "tests": tests, "paths": paths}


def _reduce_dimshuffle(records, out: Path) -> dict:
    pairs = {}
    for r in records:
        key = (_dataset_key(r), r["spec"]["cells"][0])
        flag = r["spec"]["model"]["dimension_shuffle"]
        pairs.setdefault(key, {})[flag] = r["selected"]["test_accuracy"] if r.get("status") == "ok" else None
    rows, on, off = [], [], []
    for (ds, cells), p in pairs.items():
        rows.append([ds, cells, p.get(True), p.get(False)])
        if p.get(True) is not None and p.get(False) is not None:
            on.append(p[True])
            off.append(p[False])
    write_csv(out / "dimshuffle.csv", ["dataset", "cells", "acc_shuffle", "acc_noshuffle"], rows)
    paths = {"table": str(out / "dimshuffle.csv")}
    if on:
        paths["figure"] = str(plots.paired_scatter(out / "dimshuffle.png", off, on,
                                                   "no dimension shuffle", "dimension shuffle"))
    return {"corrected_alpha": dunn_sidak(ALPHA, 1),
            "wilcoxon": _safe_wilcoxon(on, off, 1) if on else {"undefined": "no completed pairs"},
            "win_tie_loss": _wtl(on, off), "paths": paths}


def _reduce_substitute(records, out: Path) -> dict:
    kinds = [k.value for k in BranchKind]
    grid = {}
    for r in records:
        key = (_dataset_key(r), r["spec"]["cells"][0])
        acc = r["selected"]["test_accuracy"] if r.get("status") == "ok" else None
        grid.setdefault(key, {})[r["spec"]["model"]["branch"]] = acc
    rows = [[ds, cells] + [v.get(k) for k in kinds] for (ds, cells), v in grid.items()]
    write_csv(out / "substitute.csv", ["dataset", "cells"] + [f"{k}-FCN" for k in kinds], rows)
    present = [k for k in kinds if any(v.get(k) is not None for v in grid.values())]
    pairs = list(combinations(present, 2))
    m = max(len([p for p in pairs if p[0] in MATRIX_ROWS and p[1] in MATRIX_COLS]), 1)
    results, pvals = {}, {}
    for a, b in pairs:
        complete = [v for v in grid.values() if v.get(a) is not None and v.get(b) is not None]
        xa, xb = [v[a] for v in complete], [v[b] for v in complete]
        test = _safe_wilcoxon(xa, xb, m) if complete else {"undefined": "no completed pairs"}
        results[f"{a}|{b}"] = {"wilcoxon": test, "win_tie_loss": _wtl(xa, xb)}
        if "p_value" in test:
            pvals[(f"{a}-FCN", f"{b}-FCN")] = test["p_value"]
    long_rows = [[a, b, r["wilcoxon"].get("p_value"), r["wilcoxon"].get("reject"),
                  r["win_tie_loss"]["wins"], r["win_tie_loss"]["ties"], r["win_tie_loss"]["losses"]]
                 for (a, b), r in zip(pairs, results.values())]
    write_csv(out / "pairwise.csv", ["model_a", "model_b", "p_value", "reject", "wins", "ties", "losses"],
              long_rows)
    # fixed layout: LSTM/GRU/RNN rows against GRU/RNN/Dense columns, upper triangle only
    t4 = []
    for i, a in enumerate(MATRIX_ROWS):
        row = [f"{a}-FCN"]
        for j, b in enumerate(MATRIX_COLS):
            res = results.get(f"{a}|{b}")
            if j < i or res is None:
                row.append("")
            else:
                p = res["wilcoxon"].get("p_value")
                w = res["win_tie_loss"]
                row.append(f"{'NA' if p is None else format(p, '.3g')} ({w['wins']}, {w['ties']}, {w['losses']})")
        t4.append(row)
    write_csv(out / "branch_matrix.csv", [""] + [f"{b}-FCN" for b in MATRIX_COLS], t4)
    paths = {"table": str(out / "substitute.csv"), "pairwise": str(out / "pairwise.csv"),
             "matrix": str(out / "branch_matrix.csv")}
    if pvals:
        paths["figure"] = str(plots.pvalue_matrix(out / "substitute.png", [f"{k}-FCN" for k in present],
                                                  pvals, dunn_sidak(ALPHA, m)))
    return {"corrected_alpha": dunn_sidak(ALPHA, m), "comparisons": m, "pairs": results, "paths": paths}


_REDUCERS = {"normcompare": _reduce_normcompare, "blockprobe": _reduce_blockprobe,
             "dimshuffle": _reduce_dimshuffle, "substitute": _reduce_substitute}


# -- probes / activations / comparison --------------------------------------------

def _checkpoint_data(header: dict) -> Dataset:
    source = header.get("dataset_source")
    if not source:
        raise ContractError("checkpoint does not record its dataset source; pass one explicitly")
    data, _ = load_prepared(source, header["norm"])
    return data


def run_probe(checkpoint, out, source: str | None = None, epochs: int = 2000, batch: int = 128,
              seed: int = 0) -> dict:
    """Probe a trained checkpoint and write a one-row probe accuracy CSV."""
    model, header = load_checkpoint(checkpoint)
    data = load_prepared(source, header["norm"])[0] if source else _checkpoint_data(header)
    result = probe_suite(model, data, epochs=epochs, batch=batch, seed=seed)
    cols = [f"{f}_{p}" for p in PROBES for f in FEATURE_SETS]
    acc = result["accuracy"]
    out = Path(out)
    path = write_csv(out / "probe_table.csv", ["dataset"] + cols,
                     [[data.name] + [acc[tuple(c.rsplit("_", 1))] for c in cols]])
    return {"accuracy": acc, "widths": result["widths"], "path": str(path)}


def export_activations(checkpoint, out, sample: int = 0, split: str = "test", stage_name: str = "bn",
                       blocks=(0, 1, 2), filters=None, seed: int = 0, series=None, source=None) -> dict:
    """Write the chosen sample and one filter's response per conv block to CSV + PNG.

    ``stage_name`` picks the conv output, its batch-normalized version
    (default) or the post-ReLU block output. Without ``filters`` one filter per
    block is drawn at random from ``Rng(seed)``.
    """
    model, header = load_checkpoint(checkpoint)
    if stage_name not in ("conv", "bn", "relu"):
        raise ParameterError(f"stage must be conv, bn or relu, got {stage_name!r}")
    if series is None:
        data = load_prepared(source, header["norm"])[0] if source else _checkpoint_data(header)
        X, _ = data.arrays(split, model.dtype)
        if not 0 <= sample < len(X):
            raise ParameterError(f"sample index {sample} out of range for {len(X)} {split} samples")
        x = X[sample:sample + 1]
    else:
        x = np.asarray(series, dtype=model.dtype).reshape(1, 1, -1)
    blocks = list(blocks)
    if any(b not in (0, 1, 2) for b in blocks):
        raise ParameterError(f"conv block indices must be in 0..2, got {blocks}")
    rng = Rng(seed)
    if filters is None:
        filters = [int(rng.choice(model.cfg.fcn.filters[b], 1)[0]) for b in blocks]
    filters = list(filters)
    if len(filters) != len(blocks):
        raise ParameterError(f"need one filter index per block, got {len(filters)} for {len(blocks)} blocks")
    for b, f in zip(blocks, filters):
        if not 0 <= f < model.cfg.fcn.filters[b]:
            raise ParameterError(f"filter index {f} out of range for block {b} "
                                 f"with {model.cfg.fcn.filters[b]} filters")
    capture = {}
    model.fcn_forward(model._as_input(x), "infer", capture)
    columns = {"raw": x[0, 0].astype(np.float64)}
    for b, f in zip(blocks, filters):
        columns[f"conv{b + 1}_f{f}"] = capture[b][stage_name][0, f].astype(np.float64)
    out = Path(out)
    names = list(columns)
    rows = [[t] + [columns[n][t] for n in names] for t in range(x.shape[-1])]
    csv_path = write_csv(out / "activations.csv", ["t"] + names, rows)
    fig = plots.activation_figure(out / "activations.png", columns, f"{header.get('label', '')} ({stage_name})")
    return {"columns": columns, "csv": str(csv_path), "figure": str(fig)}


def _load_records(records) -> list:
    out = []
    for r in records:
        if isinstance(r, ExperimentRecord):
            out.append(r)
        elif isinstance(r, dict):
            out.append(ExperimentRecord.from_dict(r))
        else:
            out.append(ExperimentRecord.from_dict(read_json(r)))
    return out


def results_table(records) -> ResultTable:
    """Rows are datasets; when one model has several records per dataset
    (e.g. a cell-count sweep) rows are split by cell count instead of overwritten."""
    done = [r for r in _load_records(records) if r.status == "ok"]
    keys = [(r.label, r.dataset["name"]) for r in done]
    by_cells = len(set(keys)) != len(keys)
    table = ResultTable()
    for r in done:
        row = f"{r.dataset['name']} [cells={r.selected['cells']}]" if by_cells else r.dataset["name"]
        if r.label in table.rows.get(row, {}):
            raise ContractError(f"duplicate record for model {r.label!r} on {row!r}")
        table.add(row, r.label, r.accuracy, r.dataset["num_classes"])
    return table


def compare(records, baseline: str | None, out) -> dict:
    """Per-dataset summary: accuracies, MPCE and Count footers, W/T/L vs baseline."""
    table = results_table(records)
    models = table.models
    if not models:
        raise DataError("no completed records to compare")
    covered = {m: {d for d, accs in table.rows.items() if m in accs} for m in models}
    every = set(table.rows)
    for m, ds in covered.items():
        if ds != every:
            raise ContractError(f"model {m!r} is missing datasets {sorted(every - ds)}")
    if baseline is not None and baseline not in models:
        raise ParameterError(f"baseline {baseline!r} not among models {models}")
    body = [[d] + [table.rows[d][m] for m in models] for d in table.rows]
    footer = [["MPCE"] + [mpce(table, m) for m in models],
              ["Count"] + best_counts(list(table.rows.values()), models)]
    wtl = {}
    if baseline is not None:
        base = table.column(baseline)
        cells = ["W/T/L vs " + baseline]
        for m in models:
            w = win_tie_loss(table.column(m), base)
            wtl[m] = (w.wins, w.ties, w.losses)
            cells.append(f"{w.wins}/{w.ties}/{w.losses}")
        footer.append(cells)
    path = write_csv(Path(out) / "compare.csv", ["dataset"] + models, body + footer)
    return {"path": str(path), "models": models, "mpce": dict(zip(models, footer[0][1:])),
            "count": dict(zip(models, footer[1][1:])), "win_tie_loss": wtl}

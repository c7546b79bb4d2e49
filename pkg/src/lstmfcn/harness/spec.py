"""Experiment specifications, config files and dataset sources."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from urllib.parse import parse_qsl

from ..blocks import BranchKind, FcnConfig, ModelConfig
from ..data import Dataset, NormScheme, assemble, find_split_files, sine_square
from ..errors import ConfigError, DataError, ParameterError
from ..training import BATCH, EPOCHS

SYNTHETIC_PREFIX = "synthetic:"


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment (or, with several datasets, a family of them).

    ``cells`` holds the grid of cell counts; more than one value triggers the
    grid search. ``seed`` is mandatory: nothing is seeded from the clock.
    """

    datasets: tuple
    seed: int
    norm: NormScheme = NormScheme.PER_SAMPLE
    model: ModelConfig = field(default_factory=ModelConfig)
    cells: tuple = (8, 64, 128)
    epochs: int = EPOCHS
    batch: int = BATCH
    out: str = "runs"
    name: str = ""
    probe: bool = False
    repeat: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        datasets = (self.datasets,) if isinstance(self.datasets, str) else tuple(self.datasets)
        object.__setattr__(self, "datasets", tuple(str(d) for d in datasets))
        object.__setattr__(self, "norm", NormScheme.parse(self.norm))
        object.__setattr__(self, "cells", tuple(sorted(int(c) for c in self.cells)))
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig.from_dict(self.model))
        if not self.datasets:
            raise ConfigError("experiment spec lists no datasets")
        if self.seed is None:
            raise ConfigError("experiment spec needs an explicit seed")
        if not self.cells or min(self.cells) < 1:
            raise ConfigError(f"cells must be positive, got {self.cells}")
        if self.epochs < 0 or self.batch < 1 or self.repeat < 1:
            raise ConfigError("epochs must be >= 0, batch >= 1 and repeat >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        shuffle = "" if self.model.dimension_shuffle else "-noshuffle"
        return f"{self.model.branch.value}-FCN{shuffle}"

    def replace(self, **changes) -> "ExperimentSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["norm"] = self.norm.value
        d["model"] = self.model.to_dict()
        d["datasets"] = list(self.datasets)
        d["cells"] = list(self.cells)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad experiment spec: {exc}") from exc


# -- config files ----------------------------------------------------------------

_MODEL_KEYS = {"branch", "dimension_shuffle", "dropout_p", "filters", "kernels"}
_BOOL = {"true": True, "yes": True, "1": True, "on": True,
         "false": False, "no": False, "0": False, "off": False}


def _coerce(key: str, value):
    if not isinstance(value, str):
        return value
    v = value.strip()
    if key in ("datasets",):
        return [s.strip() for s in v.split(",") if s.strip()]
    if key in ("cells", "filters", "kernels"):
        return [int(s) for s in v.replace(" ", "").split(",") if s]
    if key in ("dimension_shuffle", "probe"):
        if v.lower() not in _BOOL:
            raise ConfigError(f"{key} must be a boolean, got {value!r}")
        return _BOOL[v.lower()]
    if key in ("epochs", "batch", "seed", "repeat", "workers"):
        return int(v)
    if key == "dropout_p":
        return float(v)
    return v


def parse_key_values(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config(path) -> dict:
    """Read a JSON (nested) or flat ``key = value`` config into a plain dict."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    else:
        raw = parse_key_values(text)
    if isinstance(raw.get("model"), dict):
        raw.update(raw.pop("model"))
    if "dataset" in raw and "datasets" not in raw:
        raw["datasets"] = raw.pop("dataset")
    return raw


def build_spec(settings: dict) -> ExperimentSpec:
    """Assemble an ExperimentSpec from flat settings (config file merged with CLI flags)."""
    s = {k: _coerce(k, v) for k, v in settings.items() if v is not None}
    s.pop("workers", None)
    unknown = set(s) - _MODEL_KEYS - {f for f in ExperimentSpec.__dataclass_fields__} - {"cells"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        fcn = FcnConfig(s.pop("filters", FcnConfig.filters), s.pop("kernels", FcnConfig.kernels))
        model_kwargs = {k: s.pop(k) for k in list(s) if k in _MODEL_KEYS}
        if "branch" in model_kwargs:
            model_kwargs["branch"] = BranchKind.parse(model_kwargs["branch"])
        cells = s.get("cells", (8, 64, 128))
        if isinstance(cells, int):
            cells = (cells,)
        s["cells"] = tuple(cells)
        s["model"] = ModelConfig(fcn=fcn, cells=min(s["cells"]), **model_kwargs)
        if "seed" not in s:
            raise ConfigError("a seed is required (config key 'seed' or --seed)")
        if "datasets" not in s:
            raise ConfigError("no dataset given (config key 'datasets' or --dataset)")
        return ExperimentSpec(**s)
    except (ParameterError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# -- dataset sources ---------------------------------------------------------------

def load_source(source: str) -> tuple[Dataset, list]:
    """Resolve a dataset source to ``(Dataset, files_read)``.

    Accepted forms: a directory holding ``*_TRAIN``/``*_TEST`` files, the
    path of a ``*_TRAIN`` file, ``train_path,test_path`` joined by ``::``,
    or ``synthetic:sine_square?n_train=100&length=64&noise=0.1&seed=0``.
    """
    if source.startswith(SYNTHETIC_PREFIX):
        body = source[len(SYNTHETIC_PREFIX):]
        kind, _, query = body.partition("?")
        if kind != "sine_square":
            raise DataError(f"unknown synthetic dataset {kind!r}")
        casts = {"n_train": int, "n_test": int, "length": int, "noise": float, "seed": int}
        try:
            kwargs = {k: casts[k](v) for k, v in parse_qsl(query)}
        except (KeyError, ValueError) as exc:
            raise DataError(f"bad synthetic dataset parameters in {source!r}") from exc
        ds = sine_square(**kwargs)
        ds.name = source
        return ds, []
    if "::" in source:
        train, test = source.split("::", 1)
        paths = (Path(train), Path(test))
    else:
        p = Path(source)
        if p.is_dir():
            paths = find_split_files(p)
        elif p.is_file() and "_TRAIN" in p.name.upper():
            idx = p.name.upper().rindex("_TRAIN")
            paths = (p, p.with_name(p.name[:idx] + "_TEST" + p.name[idx + 6:]))
        else:
            raise DataError(f"dataset source {source!r} does not exist or is not a *_TRAIN file/directory")
    for q in paths:
        if not q.is_file():
            raise DataError(f"dataset file {q} does not exist")
    name = paths[0].name.split("_TRAIN")[0] if "_TRAIN" in paths[0].name else paths[0].stem
    return assemble(*paths, name=name), list(paths)

"""UCR-format loading, the two z-normalization schemes, zero padding and class weights."""
from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (ContractError, DataError, DegenerateStatisticsError, EmptyDatasetError,
                     ParameterError, ParseError)


class NormScheme(str, enum.Enum):
    PER_SAMPLE = "PER_SAMPLE"
    DATASET = "DATASET"

    @classmethod
    def parse(cls, value) -> "NormScheme":
        if isinstance(value, cls):
            return value
        aliases = {"sample": cls.PER_SAMPLE, "per_sample": cls.PER_SAMPLE, "dataset": cls.DATASET}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        raise ParameterError(f"unknown normalization scheme {value!r}; expected sample or dataset")


@dataclass(frozen=True)
class LabeledSeries:
    label: int
    values: np.ndarray
    original_length: int

    @classmethod
    def of(cls, label, values) -> "LabeledSeries":
        arr = np.asarray(values, dtype=np.float64)
        return cls(int(label), arr, len(arr))

    @property
    def prefix(self) -> np.ndarray:
        """The un-padded values."""
        return self.values[:self.original_length]


@dataclass
class Dataset:
    train: list
    test: list
    num_classes: int
    max_length: int
    normalization: NormScheme | None = None
    train_mean: float | None = None
    train_std: float | None = None
    name: str = "dataset"
    label_names: list = field(default_factory=list)

    def __post_init__(self):
        for s in self.train + self.test:
            if not 0 <= s.label < self.num_classes:
                raise DataError(f"label {s.label} outside [0, {self.num_classes})")

    def arrays(self, split: str, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
        """``(X, y)`` with X shaped ``N x 1 x max_length``."""
        samples = getattr(self, split)
        if any(len(s.values) != self.max_length for s in samples):
            raise ContractError(f"{split} split is not padded to {self.max_length}")
        X = np.stack([s.values for s in samples]).astype(dtype)[:, None, :]
        return X, np.array([s.label for s in samples], dtype=int)


_SPLIT = re.compile(r"[ ]*[,\t][ ]*|[ ]+")


def load_ucr(path) -> tuple[list, list]:
    """Parse one UCR text file.

    Returns ``(samples, raw_labels)`` where sample labels are contiguous ids
    assigned in sorted order of the distinct raw labels.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        tokens = _SPLIT.split(line.strip())
        # trailing empty/NaN fields mark absent values in variable-length files
        while tokens and tokens[-1].strip().lower() in ("", "nan"):
            tokens.pop()
        parsed = []
        for col, tok in enumerate(tokens, start=1):
            try:
                v = float(tok)
            except ValueError:
                raise ParseError(path, lineno, col, tok) from None
            if not math.isfinite(v):
                raise ParseError(path, lineno, col, tok)
            parsed.append(v)
        if not parsed:
            continue
        rows.append((parsed[0], parsed[1:]))
    if not rows:
        raise EmptyDatasetError(f"{path} contains no samples")
    raw = sorted({r[0] for r in rows})
    remap = {v: i for i, v in enumerate(raw)}
    return [LabeledSeries.of(remap[lab], vals) for lab, vals in rows], raw


def assemble(train_path, test_path, name: str | None = None) -> Dataset:
    """Load a train/test pair, sharing one label map between the splits."""
    train, raw_train = load_ucr(train_path)
    test, raw_test = load_ucr(test_path)
    raw = sorted(set(raw_train) | set(raw_test))
    remap = {v: i for i, v in enumerate(raw)}

    def relabel(samples, local):
        return [replace(s, label=remap[local[s.label]]) for s in samples]

    train, test = relabel(train, raw_train), relabel(test, raw_test)
    max_length = max(s.original_length for s in train + test)
    return Dataset(train, test, len(raw), max_length,
                   name=name or Path(train_path).stem.replace("_TRAIN", ""), label_names=raw)


def find_split_files(directory) -> tuple[Path, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    found = {}
    for split in ("TRAIN", "TEST"):
        hits = sorted(p for p in directory.iterdir()
                      if p.is_file() and p.stem.upper().endswith("_" + split))
        if not hits:
            raise DataError(f"no *_{split} file in {directory}")
        found[split] = hits[0]
    return found["TRAIN"], found["TEST"]


def save_ucr(samples, path, label_names=None, delimiter="\t"):
    """Write samples in UCR layout; values use ``repr`` so parsing round-trips exactly."""
    with open(path, "w") as fh:
        for s in samples:
            label = label_names[s.label] if label_names else s.label
            label_txt = repr(float(label)) if not float(label).is_integer() else str(int(label))
            fh.write(delimiter.join([label_txt] + [repr(float(v)) for v in s.prefix]) + "\n")


# -- normalization ---------------------------------------------------------------

def znorm_per_sample(s: LabeledSeries) -> LabeledSeries:
    x = s.prefix
    std = x.std()
    out = np.zeros_like(x) if std == 0 else (x - x.mean()) / std
    return LabeledSeries(s.label, out, s.original_length)


def _pooled(samples) -> np.ndarray:
    return np.concatenate([s.prefix for s in samples]) if samples else np.zeros(0)


def znorm_dataset(train, test, mean: float | None = None, std: float | None = None):
    """Standardize both splits with the pooled train mean/std (population divisor)."""
    if not train:
        raise ParameterError("znorm_dataset needs a non-empty train split")
    if mean is None or std is None:
        pooled = _pooled(train)
        mean, std = float(pooled.mean()), float(pooled.std())
    if std == 0:
        raise DegenerateStatisticsError("train split is constant; dataset z-normalization undefined")

    def apply(samples):
        return [LabeledSeries(s.label, (s.prefix - mean) / std, s.original_length) for s in samples]

    return apply(train), apply(test), mean, std


def pad_zeros(samples, length: int) -> list:
    out = []
    for s in samples:
        if s.original_length > length or len(s.values) > length:
            raise ContractError(f"sample of length {len(s.values)} exceeds target length {length}")
        vals = np.concatenate([s.prefix, np.zeros(length - s.original_length)])
        out.append(LabeledSeries(s.label, vals, s.original_length))
    return out


def prepare(ds: Dataset, scheme) -> Dataset:
    """Normalize (before padding), then pad every series to the longest length."""
    scheme = NormScheme.parse(scheme)
    mean = std = None
    if scheme is NormScheme.PER_SAMPLE:
        train = [znorm_per_sample(s) for s in ds.train]
        test = [znorm_per_sample(s) for s in ds.test]
    else:
        train, test, mean, std = znorm_dataset(ds.train, ds.test)
    return Dataset(pad_zeros(train, ds.max_length), pad_zeros(test, ds.max_length),
                   ds.num_classes, ds.max_length, scheme, mean, std, ds.name, list(ds.label_names))


def class_weights(labels) -> dict:
    """Balanced inverse-frequency weights ``N / (C * n_c)`` over observed classes."""
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ParameterError("class_weights needs at least one label")
    classes, counts = np.unique(labels, return_counts=True)
    n, c = labels.size, len(classes)
    return {int(k): n / (c * int(cnt)) for k, cnt in zip(classes, counts)}


def weight_vector(weights: dict, num_classes: int) -> np.ndarray:
    vec = np.ones(num_classes)
    for k, w in weights.items():
        vec[k] = w
    return vec


# -- synthetic data --------------------------------------------------------------

def sine_square(n_train: int = 100, n_test: int = 100, length: int = 64, noise: float = 0.1,
                seed: int = 0) -> Dataset:
    """Two-class set: noisy sine waves (class 0) vs. noisy square waves (class 1).

    Frequency (1.5 to 4 cycles per series) and phase are drawn per sample.
    Classes alternate so every split is balanced.
    """
    from .tensor import Rng

    rng = Rng(seed)
    t = np.arange(length) / length

    def draw(n):
        out = []
        for i in range(n):
            label = i % 2
            freq = rng.uniform(1.5, 4.0, None)
            phase = rng.uniform(0.0, 2 * np.pi, None)
            wave = np.sin(2 * np.pi * freq * t + phase)
            if label == 1:
                wave = np.where(wave >= 0, 1.0, -1.0)
            out.append(LabeledSeries.of(label, wave + rng.normal(0.0, noise, length)))
        return out

    return Dataset(draw(n_train), draw(n_test), 2, length, name="sine_square", label_names=[0, 1])

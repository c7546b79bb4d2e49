"""Atomic file output, CSV tables, JSON records and model checkpoints."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from ..blocks import LSTMFCN, ModelConfig
from ..errors import ContractError, DataError

CHECKPOINT_FORMAT = "lstmfcn-checkpoint/1"
RECORD_FORMAT = "lstmfcn-record/1"


def atomic_write(path, data: bytes | str):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return atomic_write(path, buf.getvalue())


def _parse_cell(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_csv(path) -> tuple[list, list]:
    """Return ``(header, rows)``; numeric cells come back as int/float."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[_parse_cell(c) for c in row] for row in reader]
    return header, rows


def write_json(path, obj):
    return atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read record {path}: {exc}") from exc


def save_checkpoint(path, model: LSTMFCN, meta: dict | None = None):
    """Store parameters, running statistics and config in one ``.npz`` archive."""
    header = {"format": CHECKPOINT_FORMAT, "config": model.cfg.to_dict(),
              "dtype": str(model.dtype), **(meta or {})}
    arrays = model.state_dict()
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return atomic_write(path, buf.getvalue())


def load_checkpoint(path) -> tuple[LSTMFCN, dict]:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        header = json.loads(str(archive["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        arrays = {k: archive[k] for k in archive.files if k != "__header__"}
    cfg = ModelConfig.from_dict(header["config"])
    model = LSTMFCN(cfg, dtype=np.dtype(header["dtype"]))
    model.load_state_dict(arrays)
    return model, header

"""File interchange: CSV tables, shaped-array JSON, atomic writes.

CSV files are comma separated with a header row, the time (or index)
column first and floats written with 17 significant digits, so a
write/read round trip is bit exact. Arrays in JSON carry an explicit
``shape`` and row-major ``data``.
"""
import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .ctmc import PathSample
from .emfit.params import ModelParams
from .errors import DataError

FLOAT_FMT = "%.17g"


def atomic_write(path, text):
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % v
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


def write_table(path, header, rows):
    """Write rows (iterables matching ``header``) as CSV."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    atomic_write(path, buf.getvalue())


def read_table(path):
    """Return ``(header, rows)`` with every cell as a string."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader if r]
    except (OSError, StopIteration) as exc:
        raise DataError(f"cannot read table {path}: {exc}") from exc
    return header, rows


def write_series(path, times, values, names=None, time_name="time"):
    """Time column followed by the columns of ``values`` (N, p)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    names = names or [f"x{j}" for j in range(values.shape[1])]
    write_table(path, [time_name, *names], ([t, *v] for t, v in zip(times, values)))


def read_series(path, extra=()):
    """Read a series CSV; returns ``(times, values, names, extras)``.

    Columns listed in ``extra`` (e.g. ``"group"``) are returned as strings
    in ``extras`` and excluded from ``values``.
    """
    header, rows = read_table(path)
    if not rows:
        raise DataError(f"{path} has no data rows")
    keep = [i for i, name in enumerate(header) if i > 0 and name not in extra]
    extras = {name: [r[header.index(name)] for r in rows] for name in extra if name in header}
    try:
        times = np.array([float(r[0]) for r in rows])
        values = np.array([[float(r[i]) for i in keep] for r in rows])
    except (ValueError, IndexError) as exc:
        raise DataError(f"non-numeric or ragged row in {path}: {exc}") from exc
    return times, values, [header[i] for i in keep], extras


def sampling_period(times):
    """Common spacing of a uniform time grid."""
    steps = np.diff(np.asarray(times, dtype=float))
    if steps.size == 0 or np.any(steps <= 0):
        raise DataError("time column must be strictly increasing with at least two rows")
    h = float(steps.mean())
    if np.abs(steps - h).max() > 1e-9 * max(1.0, abs(h)):
        raise DataError("time grid is not uniform")
    return h


def array_record(a):
    a = np.asarray(a)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def array_from_record(rec, dtype=float):
    try:
        return np.asarray(rec["data"], dtype=dtype).reshape(rec["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed array record: {exc}") from exc


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read JSON {path}: {exc}") from exc


def write_params(path, params, extra=None):
    rec = params.to_dict()
    rec.update(extra or {})
    write_json(path, rec)


def read_params(path):
    """``ModelParams`` from a params JSON (single fit or the truth file)."""
    return ModelParams.from_dict(read_json(path))


def write_features(path, psi, h):
    write_json(path, {"h": float(h), "psi": array_record(psi)})


def read_features(path):
    """Returns ``(psi (N, p, m), h)``."""
    rec = read_json(path)
    try:
        h = float(rec["h"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"features file {path} lacks h") from exc
    psi = array_from_record(rec["psi"])
    if psi.ndim != 3:
        raise DataError(f"features must be 3-D, got shape {psi.shape}")
    return psi, h


def write_path(path, sample):
    write_json(path, sample.to_dict())


def read_path(path):
    try:
        return PathSample.from_dict(read_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed latent path {path}: {exc}") from exc

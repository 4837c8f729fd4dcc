"""CSV ingestion, TOML run configuration and 17-digit result serialization."""

from __future__ import annotations

import csv
import json
import math
import re
import sys
from pathlib import Path

import numpy as np

from .config import FitConfig
from .data import ClusterDataset
from .errors import (ConfigError, DimensionMismatch, InconsistentClusterCovariate, IoError,
                     ParseError, SchemaError)
from .kernels import EPANECHNIKOV, TRIWEIGHT, UNIFORM, Kernel

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

_X_COL = re.compile(r"x([1-9][0-9]*)$")
_Z_COL = re.compile(r"z([1-9][0-9]*)$")
_KERNELS = {"epanechnikov": EPANECHNIKOV, "uniform": UNIFORM, "triweight": TRIWEIGHT}


def fmt(value):
    """Float text with 17 significant digits (exact round trip)."""
    return format(float(value), ".17g")


# --------------------------------------------------------------------- CSV data

def _header_layout(header):
    header = [h.strip() for h in header]
    if header[:3] != ["cluster_id", "y", "u"]:
        raise SchemaError("header must start with cluster_id,y,u")
    xs, zs = [], []
    for col in header[3:]:
        mx, mz = _X_COL.match(col), _Z_COL.match(col)
        if mx and not zs:
            xs.append(int(mx.group(1)))
        elif mz:
            zs.append(int(mz.group(1)))
        else:
            raise SchemaError(f"unexpected column {col!r}; expected x1..xp then z1..zq")
    if not xs:
        raise SchemaError("at least one x column is required")
    if xs != list(range(1, len(xs) + 1)) or zs != list(range(1, len(zs) + 1)):
        raise SchemaError("x and z columns must be numbered consecutively from 1")
    return len(xs), len(zs)


def _parse_ids(raw):
    """Integer ids when every id is an integer literal, strings otherwise."""
    try:
        ints = [int(r) for r in raw]
    except ValueError:
        return raw
    if all(str(i) == r for i, r in zip(ints, raw)):
        return ints
    return raw


def load_csv(path):
    """Read a clustered dataset from ``cluster_id,y,u,x1..xp,z1..zq`` CSV.

    Raises
    ------
    SchemaError
        Missing file, empty file or malformed header.
    ParseError
        A data row has the wrong width or a non-numeric value; ``row`` is the
        1-based line number in the file.
    InconsistentClusterCovariate
        ``z`` differs between rows of one cluster.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise SchemaError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path} is empty; a header row is required")
        p, q = _header_layout(header)
        width = 3 + p + q
        ids, vals = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise ParseError(f"line {line}: expected {width} fields, got {len(row)}", row=line)
            try:
                nums = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise ParseError(f"line {line}: {exc}", row=line) from None
            ids.append(row[0].strip())
            vals.append(nums)
    if not vals:
        raise SchemaError(f"{path} has no data rows")
    arr = np.array(vals, dtype=float)
    z_rows = arr[:, 2 + p:]
    first = {}
    for r, cid in enumerate(ids):
        if cid in first:
            if not np.array_equal(z_rows[r], z_rows[first[cid]]):
                raise InconsistentClusterCovariate(
                    f"z differs within cluster {cid!r} (line {r + 2})")
        else:
            first[cid] = r
    try:
        return ClusterDataset.from_arrays(_parse_ids(ids), arr[:, 0], arr[:, 1], arr[:, 2:2 + p],
                                          z_rows)
    except DimensionMismatch as exc:
        raise SchemaError(str(exc)) from exc


def write_csv(data, path):
    """Write ``data`` in the :func:`load_csv` schema with 17 significant digits."""
    header = ["cluster_id", "y", "u"] + [f"x{j}" for j in range(1, data.p + 1)] \
        + [f"z{k}" for k in range(1, data.q + 1)]
    cl = data.cluster_index
    try:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in range(data.n):
                i = cl[r]
                w.writerow([data.ids[i], fmt(data.y[r]), fmt(data.u[r])]
                           + [fmt(v) for v in data.x[r]] + [fmt(v) for v in data.z[i]])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------- config

_FIT_KEYS = {"h", "kernel", "grid_count", "grid_interval", "h_pilot", "min_local_obs_factor",
             "ridge_eps", "trim", "intercept"}
_ANALYSIS_KEYS = {"level", "profiles"}
_SIM_KEYS = {"study", "p", "q", "m", "cluster_size", "Sigma", "sigma", "intercept", "reps",
             "bandwidths", "coef", "integrate", "constant_coefficients"}
_SECTIONS = {"fit": _FIT_KEYS, "analysis": _ANALYSIS_KEYS, "simulate": _SIM_KEYS}
_TOP_KEYS = {"seed"}


def read_config(path):
    """Parse a TOML run configuration and check every key.

    The document has optional top-level ``seed`` and sections ``[fit]``
    (fields of :class:`~vcmm.config.FitConfig`), ``[analysis]`` and
    ``[simulate]``. Unknown sections or keys raise :class:`ConfigError`.
    """
    try:
        with Path(path).open("rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return check_config(doc)


def check_config(doc):
    for key, val in doc.items():
        if key in _SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError(f"[{key}] must be a table")
            unknown = set(val) - _SECTIONS[key]
            if unknown:
                raise ConfigError(f"unknown key(s) in [{key}]: {', '.join(sorted(unknown))}")
        elif key not in _TOP_KEYS:
            raise ConfigError(f"unknown top-level key {key!r}")
    return doc


def kernel_from_name(name):
    if isinstance(name, Kernel):
        return name
    try:
        return _KERNELS[str(name).lower()]
    except KeyError:
        raise ConfigError(f"unknown kernel {name!r}; choose from {sorted(_KERNELS)}") from None


def fit_config_from(section, **overrides):
    """Build a :class:`FitConfig` from a ``[fit]`` table plus overrides (``None`` ignored)."""
    kw = dict(section or {})
    kw.update({k: v for k, v in overrides.items() if v is not None})
    if "h" not in kw:
        raise ConfigError("bandwidth h is required (config [fit] h or --h)")
    if "kernel" in kw:
        kw["kernel"] = kernel_from_name(kw["kernel"])
    if "grid_interval" in kw:
        kw["grid_interval"] = tuple(kw["grid_interval"])
    try:
        return FitConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------- JSON

def to_json(obj, indent=2):
    """JSON text with every float written at 17 significant digits.

    Non-finite floats become ``null``. Dict keys keep insertion order, so the
    output is deterministic for deterministic input.
    """
    out = []
    _emit(obj, out, 0, indent)
    out.append("\n")
    return "".join(out)


def _emit(obj, out, level, indent):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None or isinstance(obj, (bool, np.bool_)):
        out.append("null" if obj is None else ("true" if obj else "false"))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(fmt(obj) if math.isfinite(obj) else "null")
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, np.ndarray):
        _emit(obj.tolist(), out, level, indent)
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        for i, (k, v) in enumerate(obj.items()):
            out.append(pad + json.dumps(str(k)) + ": ")
            _emit(v, out, level + 1, indent)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(end + "}")
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.append("[]")
            return
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            parts = []
            for v in obj:
                buf = []
                _emit(v, buf, 0, indent)
                parts.append("".join(buf))
            out.append("[" + ", ".join(parts) + "]")
            return
        out.append("[\n")
        for i, v in enumerate(obj):
            out.append(pad)
            _emit(v, out, level + 1, indent)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(end + "]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_text(path, text):
    try:
        Path(path).write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_table(path, header, rows):
    """CSV with floats at 17 significant digits; ``None`` and NaN become empty fields."""
    def cell(v):
        if v is None:
            return ""
        if isinstance(v, (bool, np.bool_)):
            return "true" if v else "false"
        if isinstance(v, (float, np.floating)):
            return fmt(v) if math.isfinite(v) else ("" if math.isnan(v) else fmt(v))
        return str(v)

    try:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([cell(v) for v in row])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc

"""CSV telemetry with a shipped column schema.

Rows are flushed as they are written, so an interrupted run leaves a
readable prefix.  Floats are written with 17 significant digits.
"""

from __future__ import annotations

import csv
import functools
import math
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .estimator import CtlRecord, LocRecord

FLOAT_FORMAT = "{:.17g}"


class SchemaError(ValueError):
    pass


@functools.lru_cache(maxsize=1)
def load_schema() -> dict:
    text = resources.files("freeflyer").joinpath("data/telemetry_schema.yaml").read_text()
    return yaml.safe_load(text)


def columns(kind: str) -> list:
    return list(load_schema()[kind]["columns"])


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    f = float(v)
    return "nan" if math.isnan(f) else FLOAT_FORMAT.format(f)


class CsvLog:
    """Append-only CSV file for one schema kind."""

    def __init__(self, path, kind: str):
        self.kind = kind
        self.columns = columns(kind)
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._fh.write(",".join(self.columns) + "\n")
        self._fh.flush()
        self.rows = 0

    def write(self, values) -> None:
        values = list(values)
        if len(values) != len(self.columns):
            raise SchemaError(f"{self.kind}: expected {len(self.columns)} values, got {len(values)}")
        self._fh.write(",".join(_fmt(v) for v in values) + "\n")
        self._fh.flush()
        self.rows += 1

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class NullLog:
    rows = 0

    def write(self, values) -> None:
        self.rows += 1

    def close(self) -> None:
        pass


def read_csv(path, kind: str) -> tuple[list[dict], list[str]]:
    """Rows as dicts of parsed values plus warnings.

    A header that does not match the schema raises :class:`SchemaError`
    naming the first offending column.  A truncated or malformed trailing
    row is dropped with a warning.
    """
    expected = columns(kind)
    warnings = []
    with open(path, newline="") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0]:
        raise SchemaError(f"{path}: empty file")
    header = lines[0].split(",")
    for i, name in enumerate(expected):
        if i >= len(header):
            raise SchemaError(f"{path}: missing column '{name}'")
        if header[i] != name:
            raise SchemaError(f"{path}: column {i} is '{header[i]}', expected '{name}'")
    if len(header) > len(expected):
        raise SchemaError(f"{path}: unexpected column '{header[len(expected)]}'")
    body = lines[1:]
    complete = body[:-1] if body and body[-1] != "" else body[:-1]
    if body and body[-1] != "":
        warnings.append(f"{path}: last row is truncated and was skipped")
    rows = []
    for ln, line in enumerate(csv.reader(complete), start=2):
        if len(line) != len(expected):
            warnings.append(f"{path}: row at line {ln} has {len(line)} fields; stopping here")
            break
        try:
            rows.append({k: _parse(v) for k, v in zip(expected, line)})
        except ValueError:
            warnings.append(f"{path}: row at line {ln} is malformed; stopping here")
            break
    return rows, warnings


def _parse(v: str):
    if v in ("ctl", "loc") or (v and v[0].isalpha() and v not in ("nan", "inf")):
        return v
    if v == "":
        return ""
    return float(v)


def stream_row(rec) -> list:
    nan3 = [math.nan] * 3
    if isinstance(rec, CtlRecord):
        return ["ctl", rec.stamp, rec.arrival, *rec.u, *nan3, *([math.nan] * 4), *nan3]
    return ["loc", rec.stamp, rec.arrival, *([math.nan] * 6), *rec.v, *rec.q, *rec.w]


def records_from_rows(rows) -> list:
    out = []
    for r in rows:
        if r["kind"] == "ctl":
            u = np.array([r[c] for c in ("f_x_n", "f_y_n", "f_z_n", "tau_x_nm", "tau_y_nm", "tau_z_nm")])
            out.append(CtlRecord(r["stamp_s"], u, r["arrival_s"]))
        elif r["kind"] == "loc":
            v = np.array([r["v_x_mps"], r["v_y_mps"], r["v_z_mps"]])
            q = np.array([r["q_x"], r["q_y"], r["q_z"], r["q_w"]])
            w = np.array([r["w_x_rps"], r["w_y_rps"], r["w_z_rps"]])
            out.append(LocRecord(r["stamp_s"], v, q, w, r["arrival_s"]))
        else:
            raise SchemaError(f"unknown record kind '{r['kind']}'")
    return out

"""File formats: dataset CSV, result JSON, and the plot-ready CSVs.

All numbers are written with 17 significant digits so every file
round-trips losslessly; rerunning a command with the same inputs and
seeds reproduces its outputs byte for byte.  Every file carries the
format version and the resolved configuration that produced it (JSON
field, or a leading comment line for CSV).
"""

from __future__ import annotations

import csv
import io as _io
import json

import numpy as np

from .model import DataError, Dataset

FORMAT_VERSION = 1

__all__ = [
    "FORMAT_VERSION",
    "fmt",
    "dumps_json",
    "write_json",
    "read_json",
    "write_dataset_csv",
    "read_dataset_csv",
    "write_table_csv",
    "read_table_csv",
]


def fmt(x) -> str:
    """Shortest 17-significant-digit decimal form of a number."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def dumps_json(obj) -> str:
    buf = _io.StringIO()
    _write_json_value(_plain(obj), buf)
    return buf.getvalue()


def _write_json_value(o, buf, indent=0):
    pad = "  " * indent
    if isinstance(o, dict):
        if not o:
            buf.write("{}")
            return
        buf.write("{\n")
        items = list(o.items())
        for j, (k, v) in enumerate(items):
            buf.write(pad + "  " + json.dumps(k) + ": ")
            _write_json_value(v, buf, indent + 1)
            buf.write(",\n" if j < len(items) - 1 else "\n")
        buf.write(pad + "}")
    elif isinstance(o, list):
        if not o:
            buf.write("[]")
            return
        flat = all(not isinstance(v, (dict, list)) for v in o)
        if flat:
            buf.write("[" + ", ".join(_scalar(v) for v in o) + "]")
        else:
            buf.write("[\n")
            for j, v in enumerate(o):
                buf.write(pad + "  ")
                _write_json_value(v, buf, indent + 1)
                buf.write(",\n" if j < len(o) - 1 else "\n")
            buf.write(pad + "]")
    else:
        buf.write(_scalar(o))


def _scalar(o) -> str:
    if isinstance(o, bool) or o is None or isinstance(o, str):
        return json.dumps(o)
    if isinstance(o, float):
        return fmt(o)
    return json.dumps(o)


def write_json(path, obj):
    payload = {"format_version": FORMAT_VERSION}
    payload.update(obj)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_json(payload))
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_dataset_csv(path, dataset: Dataset):
    """Dataset CSV: ``region,y,group,x1..xK`` (one-hot loadings) or
    ``region,y,z1..zG,x1..xK`` (dense loadings)."""
    onehot = dataset.is_onehot
    k = dataset.n_covariates
    g = dataset.n_groups
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if onehot:
            w.writerow(["region", "y", "group"] + [f"x{j + 1}" for j in range(k)])
        else:
            w.writerow(["region", "y"] + [f"z{j + 1}" for j in range(g)]
                       + [f"x{j + 1}" for j in range(k)])
        for block in dataset.regions:
            for i in range(block.n_obs):
                row = [str(block.region_id), str(int(block.y[i]))]
                if onehot:
                    row.append(str(int(block.group_index[i]) + 1))
                else:
                    row.extend(fmt(v) for v in block.Z[i])
                row.extend(fmt(v) for v in block.X[i])
                w.writerow(row)


def read_dataset_csv(path) -> Dataset:
    from .model import validate_dataset

    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if header[:2] != ["region", "y"]:
            raise DataError(f"{path}: header must start with region,y")
        zcols = [h for h in header if h.startswith("z")]
        xcols = [h for h in header if h.startswith("x")]
        onehot = "group" in header
        if not onehot and not zcols:
            raise DataError(f"{path}: need a group column or z columns")
        k = len(xcols)
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw or raw[0].startswith("#"):
                continue
            try:
                region = int(raw[0])
                y = int(raw[1])
                if onehot:
                    gz = int(raw[2])
                    x = [float(v) for v in raw[3:3 + k]]
                else:
                    gz = np.array([float(v) for v in raw[2:2 + len(zcols)]])
                    x = [float(v) for v in raw[2 + len(zcols):2 + len(zcols) + k]]
            except (ValueError, IndexError):
                raise DataError(f"{path}: row {lineno - 1} is malformed") from None
            rows.append((region, y, gz, np.array(x)))
    g = len(zcols) if zcols else max(int(r[2]) for r in rows)
    return validate_dataset(rows, k, g)


def write_table_csv(path, header, rows, meta: str = ""):
    """Plot-ready CSV with an optional leading ``#`` metadata comment."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if meta:
            fh.write(f"# gprobit format_version={FORMAT_VERSION} {meta}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def read_table_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    return rows[0], rows[1:]

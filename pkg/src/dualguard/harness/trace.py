"""CSV persistence of simulation traces.

Column order::

    k, x_1..x_n, u_1..u_m, u_a_1..u_a_m, y_1..y_p, y_a_1..y_a_p, r_1..r_p,
    r_u_1..r_u_m, J, J_u, J_th, J_th_u, flag_J, flag_Ju, label

Floats use 17 significant digits so a re-read reproduces every value
bit-for-bit.  Flags are the persisted flags; the label follows them through
the decision table.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..detectors import DecisionLabel
from .engine import LABELS, SimulationTrace

VECTORS = ("x", "u", "u_a", "y", "y_a", "r", "r_u")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def header(trace: SimulationTrace) -> list[str]:
    cols = ["k"]
    for name in VECTORS:
        cols += [f"{name}_{i + 1}" for i in range(getattr(trace, name).shape[-1])]
    return cols + ["J", "J_u", "J_th", "J_th_u", "flag_J", "flag_Ju", "label"]


def export_trace(trace: SimulationTrace, path, format: str = "csv"):
    if format != "csv":
        raise ValueError(f"unsupported trace format {format!r}")
    if trace.batched:
        raise ValueError("export one run at a time (trace.run(i))")
    path = Path(path)
    vec = np.hstack([getattr(trace, name) for name in VECTORS])
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(header(trace))
            for i in range(len(trace)):
                out.writerow([str(int(trace.k[i]))] + [_fmt(v) for v in vec[i]] + [
                    _fmt(trace.J[i]), _fmt(trace.J_u[i]), _fmt(trace.J_th), _fmt(trace.J_th_u),
                    str(int(trace.flag_J[i])), str(int(trace.flag_Ju[i])),
                    LABELS[trace.label_code[i]].value])
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc.strerror}") from exc


def import_trace(path) -> dict:
    """Read an exported trace into a dict of arrays keyed by signal name."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    cols, body = rows[0], rows[1:]
    table = {c: [row[i] for row in body] for i, c in enumerate(cols)}
    out = {"k": np.array(table["k"], dtype=int)}
    for name in VECTORS:
        keys = [c for c in cols if c.rsplit("_", 1)[0] == name and c.rsplit("_", 1)[1].isdigit()]
        out[name] = np.array([[float(v) for v in table[c]] for c in keys]).T.reshape(len(body), -1)
    for name in ("J", "J_u", "J_th", "J_th_u"):
        out[name] = np.array(table[name], dtype=float)
    for name in ("flag_J", "flag_Ju"):
        out[name] = np.array(table[name], dtype=int).astype(bool)
    out["label"] = [DecisionLabel(v) for v in table["label"]]
    return out

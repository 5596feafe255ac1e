"""CSV writers and plain-text summaries with a ``KEY: value`` tail."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

TAIL_MARKER = "--- summary ---"


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path):
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(v) if _is_number(v) else v for v in row] for row in r]
    return header, rows


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_summary(path, title: str, lines, tail: dict) -> Path:
    """Free-form ``lines`` followed by one ``KEY: value`` line per ``tail`` entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = [title, "=" * len(title), *lines, "", TAIL_MARKER]
    out += [f"{k.upper()}: {_fmt(v)}" for k, v in tail.items()]
    path.write_text("\n".join(out) + "\n")
    return path


def parse_summary(path) -> dict:
    text = Path(path).read_text().splitlines()
    start = text.index(TAIL_MARKER) + 1
    out = {}
    for line in text[start:]:
        if ": " in line:
            k, v = line.split(": ", 1)
            out[k] = v
    return out

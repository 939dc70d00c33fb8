"""Dice similarity and normal/abnormal aggregation."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NORMAL = "normal"
ABNORMAL = "abnormal"


def dsc(pred, gt, num_classes: int) -> np.ndarray:
    """Per-class Dice ``2|P_c & G_c| / (|P_c| + |G_c|)``.

    A class absent from both maps scores 1.0; absent from exactly one, 0.0.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"dims mismatch: {pred.shape} vs {gt.shape}")
    out = np.empty(num_classes)
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        denom = int(p.sum()) + int(g.sum())
        out[c] = 1.0 if denom == 0 else 2.0 * int((p & g).sum()) / denom
    return out


def _mean_or_none(values):
    return float(np.mean(values)) if len(values) else None


@dataclass
class DscReport:
    names: list[str]
    subsets: list[str]
    per_class: np.ndarray  # (volumes, classes)
    dsc_a: float | None
    dsc_n: float | None
    avg: float
    meta: dict = field(default_factory=dict)

    @property
    def foreground_means(self) -> np.ndarray:
        return self.per_class[:, 1:].mean(axis=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for key in sorted(self.meta):
            w.writerow([f"# {key}={self.meta[key]}"])
        w.writerow(["volume", "subset", "class", "dsc"])
        for name, subset, row in zip(self.names, self.subsets, self.per_class):
            for c, value in enumerate(row):
                w.writerow([name, subset, c, repr(float(value))])
        w.writerow(["aggregate", "dsc_a", "dsc_n", "avg"])
        fmt = lambda x: "" if x is None else repr(x)
        w.writerow(["aggregate", fmt(self.dsc_a), fmt(self.dsc_n), fmt(self.avg)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def aggregate(per_volume, subset_tags, names=None, meta=None) -> DscReport:
    """Foreground-mean DSC per volume, then abnormal, normal and overall means.

    Background (class 0) is excluded from every average.  A subset without
    volumes gets ``None``.
    """
    per_class = np.atleast_2d(np.asarray(per_volume, dtype=np.float64))
    tags = list(subset_tags)
    if len(tags) != len(per_class):
        raise ValueError("one subset tag per volume required")
    if per_class.shape[1] < 2:
        raise ValueError("need at least one foreground class")
    if names is None:
        names = [f"vol{i:03d}" for i in range(len(tags))]
    fg = per_class[:, 1:].mean(axis=1)
    dsc_a = _mean_or_none([m for m, t in zip(fg, tags) if t == ABNORMAL])
    dsc_n = _mean_or_none([m for m, t in zip(fg, tags) if t == NORMAL])
    return DscReport(list(names), tags, per_class, dsc_a, dsc_n, float(fg.mean()), dict(meta or {}))


def read_report_csv(text: str) -> DscReport:
    """Rebuild a report (and recompute its aggregates) from :meth:`DscReport.to_csv` output."""
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
    if rows[0] != ["volume", "subset", "class", "dsc"]:
        raise ValueError("not a DSC report")
    table: dict[str, dict[int, float]] = {}
    subsets: dict[str, str] = {}
    for r in rows[1:]:
        if r[0] == "aggregate":
            break
        table.setdefault(r[0], {})[int(r[2])] = float(r[3])
        subsets[r[0]] = r[1]
    names = list(table)
    per_class = [[table[n][c] for c in sorted(table[n])] for n in names]
    return aggregate(per_class, [subsets[n] for n in names], names=names)

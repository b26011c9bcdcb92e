"""Binary change-detection metrics from confusion counts."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

CSV_HEADER = ("Pre", "Rec", "F1", "Kappa", "OA")


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return _ratio(2 * p * r, p + r)

    @property
    def oa(self) -> float:
        return _ratio(self.tp + self.tn, self.total)

    @property
    def kappa(self) -> float:
        n = self.total
        if not n:
            return 0.0
        pe = ((self.tp + self.fp) * (self.tp + self.fn) + (self.fn + self.tn) * (self.fp + self.tn)) / (n * n)
        if pe == 1.0:
            return 0.0
        return (self.oa - pe) / (1.0 - pe)

    def __add__(self, other: "MetricsReport") -> "MetricsReport":
        return MetricsReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(precision=self.precision, recall=self.recall, f1=self.f1, kappa=self.kappa, oa=self.oa)
        return d

    def percent_row(self) -> list:
        return [f"{100 * v:.2f}" for v in (self.precision, self.recall, self.f1, self.kappa, self.oa)]


def _as_mask(m) -> np.ndarray:
    return np.asarray(getattr(m, "mask", m)).astype(bool)


def confusion_counts(pred, gt) -> MetricsReport:
    p, g = _as_mask(pred), _as_mask(gt)
    if p.shape != g.shape:
        raise ValueError(f"compute_metrics: prediction shape {p.shape} != ground-truth shape {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return MetricsReport(tp, fp, fn, p.size - tp - fp - fn)


def compute_metrics(pred, gt) -> MetricsReport:
    return confusion_counts(pred, gt)


def metrics_csv(rows: dict) -> str:
    """CSV text with header ``name,Pre,Rec,F1,Kappa,OA`` (percent, 2 decimals)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("name",) + CSV_HEADER)
    for name, report in rows.items():
        writer.writerow([name] + report.percent_row())
    return buf.getvalue()


def metrics_record(split: str, report: MetricsReport, **extra) -> str:
    """One JSON line describing a split's metrics."""
    return json.dumps({"split": split, **extra, **report.as_dict()}, sort_keys=True)

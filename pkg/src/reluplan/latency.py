"""Affine online-latency model in the ReLU count, and accuracy/latency Pareto fronts."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from .errors import CalibrationError

CSV_COLUMNS = ("label", "relus", "latency_ms", "accuracy_pct")


@dataclass(frozen=True)
class LatencyModel:
    per_relu_us: float
    base_ms: float

    def __post_init__(self):
        if not self.per_relu_us > 0:
            raise CalibrationError("per-ReLU cost must be positive", per_relu_us=self.per_relu_us)
        if not self.base_ms >= 0:
            raise CalibrationError("base latency must be non-negative", base_ms=self.base_ms)

    def to_dict(self) -> dict:
        return {"per_relu_us": self.per_relu_us, "base_ms": self.base_ms}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyModel":
        try:
            return cls(float(d["per_relu_us"]), float(d["base_ms"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise CalibrationError(f"unparseable latency model: {exc}") from exc


@dataclass(frozen=True)
class RunRecord:
    label: str
    relus: int
    latency_ms: float
    accuracy_pct: float | None = None
    dataset: str | None = None

    def __post_init__(self):
        if self.relus <= 0 or not self.latency_ms > 0:
            raise CalibrationError("records need positive relus and latency",
                                   label=self.label, relus=self.relus, latency_ms=self.latency_ms)


def calibrate(points: Sequence[tuple[float, float]]) -> LatencyModel:
    """Least-squares affine fit latency_ms = base_ms + per_relu_us * relus / 1000.

    A negative fitted intercept is not a valid model; the fit is then redone
    through the origin (the constrained least-squares optimum with base >= 0).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise CalibrationError("need at least two (relus, latency_ms) points")
    x, y = pts[:, 0], pts[:, 1]
    if np.unique(x).size < 2:
        raise CalibrationError("degenerate points: need two distinct ReLU counts")
    a = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(a, y, rcond=None)
    if intercept < 0:
        slope, intercept = float(x @ y / (x @ x)), 0.0
    if not slope > 0:
        raise CalibrationError("fitted per-ReLU slope is not positive", slope_ms_per_relu=float(slope))
    return LatencyModel(float(slope) * 1000.0, float(intercept))


def predict(model: LatencyModel, relus) -> float | np.ndarray:
    r = np.asarray(relus, dtype=np.float64)
    if np.any(r < 0):
        raise CalibrationError("ReLU count must be non-negative")
    out = model.base_ms + model.per_relu_us * r / 1000.0
    return float(out) if out.ndim == 0 else out


def residuals(model: LatencyModel, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts[:, 1] - predict(model, pts[:, 0])


def leave_one_out(points) -> list[float]:
    """Relative error on each point when the model is fitted on the others."""
    pts = [tuple(p) for p in points]
    out = []
    for i, (r, ms) in enumerate(pts):
        model = calibrate(pts[:i] + pts[i + 1:])
        out.append(abs(predict(model, r) - ms) / ms)
    return out


def dominates(a: RunRecord, b: RunRecord) -> bool:
    return (a.latency_ms <= b.latency_ms and a.accuracy_pct >= b.accuracy_pct
            and (a.latency_ms < b.latency_ms or a.accuracy_pct > b.accuracy_pct))


def pareto_frontier(records: Iterable[RunRecord]) -> list[RunRecord]:
    """Records no other record dominates, sorted by latency (then accuracy, descending).

    Sweeps latency groups in increasing order, keeping a record only if it beats
    the best accuracy seen at strictly lower latency and is the top of its group.
    """
    recs = list(records)
    if any(r.accuracy_pct is None for r in recs):
        raise CalibrationError("pareto_frontier needs accuracy on every record")
    recs.sort(key=lambda r: (r.latency_ms, -r.accuracy_pct, r.label))
    frontier, best = [], -np.inf
    i = 0
    while i < len(recs):
        j = i
        while j < len(recs) and recs[j].latency_ms == recs[i].latency_ms:
            j += 1
        top = recs[i].accuracy_pct
        if top > best:
            frontier.extend(r for r in recs[i:j] if r.accuracy_pct == top)
            best = top
        i = j
    return frontier


# -- CSV -------------------------------------------------------------------------


def _opt_float(s: str):
    return None if s is None or s.strip() == "" else float(s)


def read_records(text: str) -> list[RunRecord]:
    reader = csv.DictReader(io.StringIO(text))
    missing = {"label", "relus", "latency_ms"} - set(reader.fieldnames or ())
    if missing:
        raise CalibrationError(f"CSV is missing columns {sorted(missing)}")
    out = []
    for row in reader:
        try:
            out.append(RunRecord(row["label"], int(row["relus"]), float(row["latency_ms"]),
                                 _opt_float(row.get("accuracy_pct")), row.get("dataset") or None))
        except ValueError as exc:
            raise CalibrationError(f"bad CSV row {row}: {exc}") from exc
    return out


def load_records(path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        return read_records(fh.read())


def write_records(records: Iterable[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([r.label, r.relus, repr(r.latency_ms),
                    "" if r.accuracy_pct is None else repr(r.accuracy_pct)])
    return buf.getvalue()


def fixture(name: str) -> list[RunRecord]:
    """Bundled benchmark rows: ``cifar100``, ``tiny_imagenet`` or ``imagenet``."""
    text = resources.files("reluplan").joinpath(f"data/latency_{name}.csv").read_text()
    return read_records(text)

"""Sequence-level online anomaly detection metrics.

Each test sequence gets one verdict. Sub-sequence anomalies flagged too early
(before any window covering the flagged step can reach the anomaly onset) count
as false positives. Only the first flagged step of a sequence matters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .detect import DetectionOutcome

NORMAL = "normal"
TS_ANOMALY = "ts_anomaly"
SUBSEQ_ANOMALY = "subseq_anomaly"


@dataclass(frozen=True)
class GroundTruth:
    kind: str
    T: int
    t_gt: int | None = None
    t_end: int | None = None
    root_cause_channels: frozenset[int] = field(default_factory=frozenset)
    anomaly_type: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "root_cause_channels", frozenset(int(c) for c in self.root_cause_channels))
        if self.kind == NORMAL:
            if self.t_gt is not None or self.root_cause_channels:
                raise ValueError("normal sequences carry no anomaly span or root cause")
        elif self.kind == TS_ANOMALY:
            if self.t_gt is None:
                object.__setattr__(self, "t_gt", 0)
            if self.t_end is None:
                object.__setattr__(self, "t_end", self.T - 1)
            if self.t_gt != 0 or self.t_end != self.T - 1:
                raise ValueError("time-series anomalies span the whole sequence")
        elif self.kind == SUBSEQ_ANOMALY:
            if self.t_end is None:
                object.__setattr__(self, "t_end", self.T - 1)
            if self.t_gt is None or not 0 <= self.t_gt <= self.t_end < self.T:
                raise ValueError(f"invalid anomalous span [{self.t_gt}, {self.t_end}] for T={self.T}")
        else:
            raise ValueError(f"unknown ground-truth kind {self.kind!r}")

    @property
    def anomalous(self) -> bool:
        return self.kind != NORMAL

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "t_gt": self.t_gt,
            "t_end": self.t_end,
            "root_cause_channels": sorted(self.root_cause_channels),
            "anomaly_type": self.anomaly_type,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(d["kind"], int(d["T"]), d.get("t_gt"), d.get("t_end"),
                   frozenset(d.get("root_cause_channels") or ()), d.get("anomaly_type"))


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    tp_rc: int = 0
    fp_rc: int = 0

    def to_dict(self) -> dict:
        return {"N_tp": self.tp, "N_fp": self.fp, "N_fn": self.fn, "N_tn": self.tn,
                "N_tp_rc": self.tp_rc, "N_fp_rc": self.fp_rc}


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)


def classify(outcome: DetectionOutcome, gt: GroundTruth, w: int) -> str:
    """Label one sequence as ``tp``, ``fp``, ``fn`` or ``tn``."""
    t_p = outcome.first_flagged_step
    if t_p is not None and t_p >= gt.T:
        raise ValueError(f"flagged step {t_p} outside a sequence of length {gt.T}")
    flagged = t_p is not None
    if gt.kind == NORMAL:
        return "fp" if flagged else "tn"
    if not flagged:
        return "fn"
    if gt.kind == SUBSEQ_ANOMALY and t_p < gt.t_gt - (w - 1):
        return "fp"
    return "tp"


def f1_score(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def prf(counts: ConfusionCounts) -> tuple[float, float, float]:
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    return p, r, f1_score(p, r)


def count(outcomes: list[DetectionOutcome], gts: list[GroundTruth], w: int) -> tuple[ConfusionCounts, list[str]]:
    if len(outcomes) != len(gts):
        raise ValueError("one outcome per ground truth required")
    labels = [classify(o, g, w) for o, g in zip(outcomes, gts)]
    c = ConfusionCounts()
    for lab in labels:
        setattr(c, lab, getattr(c, lab) + 1)
    c.tp_rc, c.fp_rc = root_cause_counts(outcomes, gts, labels)
    return c, labels


def root_cause_counts(outcomes, gts, labels) -> tuple[int, int]:
    tp_rc = fp_rc = 0
    for o, g, lab in zip(outcomes, gts, labels):
        if lab == "tp":
            if o.root_cause_channel in g.root_cause_channels:
                tp_rc += 1
            else:
                fp_rc += 1
        elif lab == "fp":
            fp_rc += 1
    return tp_rc, fp_rc


def root_cause_precision(counts: ConfusionCounts) -> float:
    n = counts.tp + counts.fp
    return counts.tp_rc / n if n else 0.0


def delay(outcome: DetectionOutcome, gt: GroundTruth) -> int:
    """Steps between anomaly onset and first flag; a miss counts up to the last step."""
    if not gt.anomalous:
        raise ValueError("detection delay is only defined for anomalous sequences")
    t_p = outcome.first_flagged_step if outcome.first_flagged_step is not None else gt.T - 1
    return abs(t_p - gt.t_gt)


def avg_delay(delays) -> float:
    delays = list(delays)
    if not delays:
        return math.nan
    return float(np.mean(delays))


def _first_above(s: np.ndarray, tau: float) -> int | None:
    idx = np.flatnonzero(s > tau)
    return int(idx[0]) if idx.size else None


def _first_above_sorted(running_max: np.ndarray, tau: float) -> int | None:
    """First index with ``s > tau`` given the running maximum of ``s``."""
    i = int(np.searchsorted(running_max, tau, side="right"))
    return i if i < running_max.size else None


def pr_curve(scores, gts: list[GroundTruth], w: int) -> tuple[list[PRPoint], dict, float]:
    """Sweep thresholds over the distinct per-sequence maxima and re-classify at each.

    ``scores`` holds one anomaly-score series per sequence. Returns the curve
    (sorted by recall), the best-threshold summary and the trapezoidal area.
    A threshold that flags nothing is anchored at precision 1.
    """
    series = [np.asarray(s, dtype=float) for s in scores]
    if len(series) != len(gts):
        raise ValueError("one score series per ground truth required")
    maxima = np.array([s.max() for s in series])
    running = [np.maximum.accumulate(s) for s in series]
    thresholds = [math.inf, *sorted(set(maxima.tolist()), reverse=True), -math.inf]

    points = []
    for tau in thresholds:
        tp = fp = fn = 0
        for rm, g in zip(running, gts):
            t_p = _first_above_sorted(rm, tau)
            out = DetectionOutcome("normal" if t_p is None else "anomalous", t_p, None, 0.0)
            lab = classify(out, g, w)
            tp += lab == "tp"
            fp += lab == "fp"
            fn += lab == "fn"
        p = tp / (tp + fp) if tp + fp else 1.0
        r = tp / (tp + fn) if tp + fn else 0.0
        points.append(PRPoint(tau, p, r))

    order = sorted(range(len(points)), key=lambda k: (points[k].recall, k))
    curve = [points[k] for k in order]
    area = auc_pr(curve)

    best_f1 = max(curve, key=lambda pt: (pt.f1, pt.precision))
    closest = min(curve, key=lambda pt: (math.hypot(1 - pt.precision, 1 - pt.recall), -pt.f1))
    best = {
        "F1_best": best_f1.f1, "P_best": best_f1.precision, "R_best": best_f1.recall,
        "tau_best": best_f1.threshold,
        "F1_closest": closest.f1, "P_closest": closest.precision, "R_closest": closest.recall,
        "tau_closest": closest.threshold,
    }
    return curve, best, area


def auc_pr(curve: list[PRPoint]) -> float:
    """Trapezoidal area under recall-sorted precision/recall points."""
    area = 0.0
    for prev, cur in zip(curve, curve[1:]):
        area += 0.5 * (prev.precision + cur.precision) * (cur.recall - prev.recall)
    return area


def evaluate(outcomes: list[DetectionOutcome], scores, gts: list[GroundTruth], w: int,
             rate: float, tau: float) -> dict:
    """Full metrics report for one model on one test set."""
    counts, labels = count(outcomes, gts, w)
    p, r, f1 = prf(counts)
    delays = [delay(o, g) for o, g in zip(outcomes, gts) if g.anomalous]
    mean_delay = avg_delay(delays)
    _, best, area = pr_curve(scores, gts, w)

    best_outcomes = []
    for s in scores:
        s = np.asarray(s, dtype=float)
        t_p = _first_above(s, best["tau_best"])
        best_outcomes.append(DetectionOutcome("normal" if t_p is None else "anomalous", t_p, None, 0.0))
    best_delays = [delay(o, g) for o, g in zip(best_outcomes, gts) if g.anomalous]

    return {
        "counts": counts.to_dict(),
        "tau": tau,
        "P": p,
        "R": r,
        "F1": f1,
        **best,
        "A_PR": area,
        "delay_steps": mean_delay,
        "delay_s": mean_delay / rate,
        "delay_best_s": avg_delay(best_delays) / rate,
        "P_rc": root_cause_precision(counts),
        "labels": labels,
    }

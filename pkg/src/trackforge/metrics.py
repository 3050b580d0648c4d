"""Absence-aware per-object tracking metrics.

Frame scores: overlap when the object is visible and a mask was reported,
1 when the object is absent and nothing was reported, 0 otherwise.

These definitions approximate the challenge metrics; they are this package's
contract, not a reimplementation of the official toolkit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

AUC_THRESHOLDS = 101
METRIC_FIELDS = ("auc", "accuracy", "robustness", "nre", "dre", "adq", "quality")


@dataclass(frozen=True)
class FrameOutcome:
    gt_visible: bool
    predicted: bool
    overlap: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError(f"overlap {self.overlap} outside [0, 1]")


@dataclass(frozen=True)
class SequenceMetrics:
    auc: float
    accuracy: float
    robustness: float
    nre: float
    dre: float
    adq: float
    quality: float
    trace: tuple[float, ...] = ()
    counts: dict[str, int] = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_FIELDS}

    def to_dict(self) -> dict:
        out = asdict(self)
        out["trace"] = list(self.trace)
        return out

    def failure_fractions(self) -> tuple[Fraction, Fraction, Fraction]:
        """Exact (robustness, nre, dre) from the frame counts."""
        visible = self.counts["visible"]
        return (
            Fraction(self.counts["tracked"], visible),
            Fraction(self.counts["not_reported"], visible),
            Fraction(self.counts["drifted"], visible),
        )


def frame_score(o: FrameOutcome) -> float:
    if o.gt_visible and o.predicted:
        return o.overlap
    if not o.gt_visible and not o.predicted:
        return 1.0
    return 0.0


def auc(outcomes: Sequence[FrameOutcome]) -> float:
    """Mean success rate over thresholds 0.00, 0.01, ..., 1.00."""
    if not outcomes:
        raise ValueError("no frames to score")
    thresholds = [k / 100 for k in range(AUC_THRESHOLDS)]
    hits = 0
    for o in outcomes:
        s = frame_score(o)
        hits += sum(1 for th in thresholds if s >= th)
    return hits / (AUC_THRESHOLDS * len(outcomes))


def per_object_metrics(outcomes: Sequence[FrameOutcome]) -> SequenceMetrics:
    if not outcomes:
        raise ValueError("no frames to score")
    visible = [o for o in outcomes if o.gt_visible]
    absent = [o for o in outcomes if not o.gt_visible]
    overlaps = [o.overlap for o in visible if o.predicted]
    tracked = sum(1 for o in visible if o.predicted and o.overlap > 0)
    not_reported = sum(1 for o in visible if not o.predicted)
    drifted = sum(1 for o in visible if o.predicted and o.overlap == 0)
    correct_absent = sum(1 for o in absent if not o.predicted)

    n_vis = len(visible)
    if overlaps:
        accuracy = math.fsum(overlaps) / len(overlaps)
    else:
        # nothing to be inaccurate about only when the object never appears
        accuracy = 1.0 if n_vis == 0 else 0.0
    if n_vis:
        robustness, nre, dre = tracked / n_vis, not_reported / n_vis, drifted / n_vis
    else:
        robustness, nre, dre = 1.0, 0.0, 0.0
    adq = correct_absent / len(absent) if absent else 1.0
    trace = tuple(frame_score(o) for o in outcomes)
    return SequenceMetrics(
        auc=auc(outcomes),
        accuracy=accuracy,
        robustness=robustness,
        nre=nre,
        dre=dre,
        adq=adq,
        quality=math.fsum(trace) / len(trace),
        trace=trace,
        counts={
            "frames": len(outcomes),
            "visible": n_vis,
            "absent": len(absent),
            "tracked": tracked,
            "not_reported": not_reported,
            "drifted": drifted,
            "correct_absent": correct_absent,
        },
    )


def aggregate(per_object: Sequence[SequenceMetrics]) -> SequenceMetrics:
    """Unweighted mean of every field over all (sequence, object) pairs."""
    if not per_object:
        raise ValueError("nothing to aggregate")
    n = len(per_object)
    means = {
        name: math.fsum(sorted(getattr(m, name) for m in per_object)) / n for name in METRIC_FIELDS
    }
    counts: dict[str, int] = {}
    for m in per_object:
        for key, value in m.counts.items():
            counts[key] = counts.get(key, 0) + value
    return SequenceMetrics(**means, counts=counts)

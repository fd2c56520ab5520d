"""Classification metrics: ACC/SEN/SPE at a threshold and threshold-free AUC.

Malignant is the positive class throughout. ``auc`` accumulates the ROC
trapezoids in integer arithmetic, so it equals the pairwise Mann-Whitney
statistic (ties counted half) exactly, not just approximately.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence


@dataclass
class MetricsReport:
    acc: float
    sen: float
    spe: float
    auc: float
    tp: int
    tn: int
    fp: int
    fn: int
    n: int

    def validate(self) -> None:
        if self.tp + self.tn + self.fp + self.fn != self.n:
            raise ValueError("confusion counts do not sum to n")
        if self.n and self.acc != (self.tp + self.tn) / self.n:
            raise ValueError("acc inconsistent with confusion counts")
        if self.tp + self.fn > 0 and self.sen != self.tp / (self.tp + self.fn):
            raise ValueError("sen inconsistent with confusion counts")
        if self.tn + self.fp > 0 and self.spe != self.tn / (self.tn + self.fp):
            raise ValueError("spe inconsistent with confusion counts")
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"auc {self.auc} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(
            acc=float(data["acc"]),
            sen=float(data["sen"]),
            spe=float(data["spe"]),
            auc=float(data["auc"]),
            tp=int(data["tp"]),
            tn=int(data["tn"]),
            fp=int(data["fp"]),
            fn=int(data["fn"]),
            n=int(data["n"]),
        )


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve by the trapezoidal method.

    Equals P(score_pos > score_neg) + 0.5 * P(tie). Both classes must be
    present. The trapezoid areas are accumulated as integers (doubled), so
    the result matches brute-force pairwise enumeration bit for bit.
    """
    scores = [float(s) for s in scores]
    labels = [int(l) for l in labels]
    if len(scores) != len(labels):
        raise ValueError("scores and labels must have equal length")
    n_pos = sum(1 for l in labels if l == 1)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc requires both classes present")

    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    area2 = 0  # twice the un-normalized area, exact in integers
    tp = fp = 0
    i = 0
    while i < len(order):
        j = i
        d_tp = d_fp = 0
        while j < len(order) and scores[order[j]] == scores[order[i]]:
            if labels[order[j]] == 1:
                d_tp += 1
            else:
                d_fp += 1
            j += 1
        area2 += d_fp * (2 * tp + d_tp)
        tp += d_tp
        fp += d_fp
        i = j
    return area2 / (2 * n_pos * n_neg)


def confusion_report(
    scores: Sequence[float],
    labels: Sequence[int],
    threshold: float = 0.5,
) -> MetricsReport:
    """Full report at ``threshold`` (predict positive iff score >= threshold)."""
    tp = tn = fp = fn = 0
    for s, l in zip(scores, labels):
        pred = 1 if s >= threshold else 0
        if pred == 1 and l == 1:
            tp += 1
        elif pred == 0 and l == 0:
            tn += 1
        elif pred == 1 and l == 0:
            fp += 1
        else:
            fn += 1
    n = len(labels)
    report = MetricsReport(
        acc=(tp + tn) / n if n else 0.0,
        sen=tp / (tp + fn) if tp + fn else 0.0,
        spe=tn / (tn + fp) if tn + fp else 0.0,
        auc=auc(scores, labels),
        tp=tp,
        tn=tn,
        fp=fp,
        fn=fn,
        n=n,
    )
    report.validate()
    return report


def mean_metrics(reports: Sequence[MetricsReport]) -> dict[str, float]:
    if not reports:
        raise ValueError("no reports to average")
    return {
        key: sum(getattr(r, key) for r in reports) / len(reports)
        for key in ("acc", "sen", "spe", "auc")
    }


def format_metrics_table(groups: dict[str, list[tuple[str, MetricsReport]]]) -> str:
    """Render grouped reports as a fixed-width ACC/SEN/SPE/AUC table."""
    lines = [f"{'Network':<22}{'ACC':>8}{'SEN':>8}{'SPE':>8}{'AUC':>8}"]
    for group, rows in groups.items():
        lines.append(group)
        for name, rep in rows:
            lines.append(
                f"{name:<22}{rep.acc:>8.4f}{rep.sen:>8.4f}{rep.spe:>8.4f}{rep.auc:>8.4f}"
            )
        if rows:
            m = mean_metrics([rep for _, rep in rows])
            lines.append(
                f"{'Mean':<22}{m['acc']:>8.4f}{m['sen']:>8.4f}{m['spe']:>8.4f}{m['auc']:>8.4f}"
            )
    return "\n".join(lines)

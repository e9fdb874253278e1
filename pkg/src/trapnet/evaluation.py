"""Detection metrics (ROC, AUC, TPR at fixed FPR) and report emission.

Adversarial examples are the positive class; a higher score means "more
adversarial". Every threshold decision is the strict ``score > tau`` used by
:func:`trapnet.defense.detect`.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .defense import calibrate_threshold
from .errors import ConfigError

REPORT_FORMAT = "trapnet-report/1"


def _nonempty(adv_scores, benign_scores):
    a = np.asarray(adv_scores, dtype=np.float64).ravel()
    b = np.asarray(benign_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ConfigError("AUC/ROC need at least one adversarial and one benign score")
    return a, b


def auc(adv_scores, benign_scores) -> float:
    """P(adv > benign) with ties counting one half (Mann-Whitney U / (n m))."""
    a, b = _nonempty(adv_scores, benign_scores)
    ranks = rankdata(np.concatenate([a, b]))  # average ranks resolve ties as 1/2
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def auc_bruteforce(adv_scores, benign_scores) -> float:
    """O(n m) pairwise count; the reference :func:`auc` is checked against."""
    a, b = _nonempty(adv_scores, benign_scores)
    wins = 0.0
    for s in a:
        wins += np.sum(s > b) + 0.5 * np.sum(s == b)
    return float(wins / (a.size * b.size))


def roc_curve(adv_scores, benign_scores) -> list[tuple[float, float]]:
    """ROC points from sweeping tau over the pooled scores, highest first.

    Starts at (0, 0) (tau at the maximum) and ends at (1, 1).
    """
    a, b = _nonempty(adv_scores, benign_scores)
    thresholds = np.unique(np.concatenate([a, b]))[::-1]
    a_sorted, b_sorted = np.sort(a), np.sort(b)
    points = [(0.0, 0.0)]
    # tau just below each distinct score, so score >= t counts as flagged
    for t in thresholds:
        tpr = (a.size - np.searchsorted(a_sorted, t, side="left")) / a.size
        fpr = (b.size - np.searchsorted(b_sorted, t, side="left")) / b.size
        points.append((float(fpr), float(tpr)))
    return points


def trapezoid_area(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


def tpr_at_fpr(adv_scores, benign_scores, fpr_target: float) -> float:
    """TPR at the threshold :func:`calibrate_threshold` picks on the benign scores."""
    a, b = _nonempty(adv_scores, benign_scores)
    tau = calibrate_threshold(b, fpr_target)
    return float(np.mean(a > tau))


def attack_success_rate(results) -> float:
    """Fraction of results flagged ``misclassified``.

    Accepts a sequence of AttackResult, an AttackBatch, or result dicts.
    """
    if hasattr(results, "misclassified") and not isinstance(results, dict):
        flags = np.asarray(results.misclassified, dtype=bool).ravel()
    else:
        flags = np.asarray(
            [r["misclassified"] if isinstance(r, dict) else r.misclassified for r in results],
            dtype=bool,
        )
    if flags.size == 0:
        raise ConfigError("no attack results")
    return float(flags.mean())


@dataclass
class RocReport:
    adv_scores: list[float]
    benign_scores: list[float]
    auc: float
    roc_points: list[tuple[float, float]]
    tpr_at: dict[float, float]

    @classmethod
    def build(cls, adv_scores, benign_scores, fpr_targets=(0.05, 0.10)) -> "RocReport":
        a, b = _nonempty(adv_scores, benign_scores)
        return cls(
            adv_scores=a.tolist(),
            benign_scores=b.tolist(),
            auc=auc(a, b),
            roc_points=roc_curve(a, b),
            tpr_at={float(f): tpr_at_fpr(a, b, f) for f in fpr_targets},
        )

    def to_dict(self) -> dict:
        return {
            "adv_scores": self.adv_scores,
            "benign_scores": self.benign_scores,
            "auc": self.auc,
            "roc_points": [list(p) for p in self.roc_points],
            "tpr_at": {f"{k:.2f}": v for k, v in sorted(self.tpr_at.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RocReport":
        return cls(
            doc["adv_scores"],
            doc["benign_scores"],
            doc["auc"],
            [tuple(p) for p in doc["roc_points"]],
            {float(k): v for k, v in doc["tpr_at"].items()},
        )


@dataclass
class ExperimentReport:
    config: dict
    model_metrics: dict
    attacks: dict = field(default_factory=dict)  # name -> {"success_rate", "roc", ...}
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        attacks = {}
        for name, entry in self.attacks.items():
            entry = dict(entry)
            if isinstance(entry.get("roc"), RocReport):
                entry["roc"] = entry["roc"].to_dict()
            attacks[name] = entry
        return {
            "format": REPORT_FORMAT,
            "config": self.config,
            "model_metrics": self.model_metrics,
            "attacks": attacks,
            "timings": self.timings,
        }


def _round_floats(obj):
    # 17 significant digits; repr-parseable and identical across runs
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            return None
        return float(f"{obj:.17g}")
    if isinstance(obj, dict):
        return {str(k): _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, np.generic):
        return _round_floats(obj.item())
    return obj


def report_json(report: ExperimentReport | dict) -> str:
    doc = report.to_dict() if isinstance(report, ExperimentReport) else report
    return json.dumps(_round_floats(doc), sort_keys=True, indent=1) + "\n"


def roc_csv(points) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fpr", "tpr"])
    for fpr, tpr in points:
        writer.writerow([f"{fpr:.17g}", f"{tpr:.17g}"])
    return buf.getvalue()


def emit_report(report: ExperimentReport, path) -> list[Path]:
    """Write ``path`` (JSON) plus one ``<stem>.<attack>.roc.csv`` per attack."""
    path = Path(path)
    written = []
    try:
        path.write_text(report_json(report))
        written.append(path)
        for name, entry in sorted(report.attacks.items()):
            roc = entry.get("roc")
            if roc is None:
                continue
            points = roc.roc_points if isinstance(roc, RocReport) else roc["roc_points"]
            csv_path = path.with_name(f"{path.stem}.{name}.roc.csv")
            csv_path.write_text(roc_csv(points))
            written.append(csv_path)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return written

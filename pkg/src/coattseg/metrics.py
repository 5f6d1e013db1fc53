"""Region-similarity evaluation: per-frame jaccard, sequence mean/recall/decay."""

from dataclasses import dataclass
import csv
import json
from pathlib import Path

import numpy as np

from .errors import DimensionError, UsageError


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred > 0
    g = gt > 0
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass
class SequenceScore:
    per_frame_j: list
    mean_j: float
    recall_j: float
    decay_j: float


def score_sequence(preds: list, gts: list) -> SequenceScore:
    """Score one sequence of binary masks against ground truth.

    recall is the fraction of frames with J > 0.5; decay is the mean J of
    the first quartile of frames minus the mean J of the last quartile
    (quartile size = floor(T / 4)).
    """
    if len(preds) != len(gts):
        raise UsageError(f"got {len(preds)} predictions for {len(gts)} ground-truth masks")
    if len(preds) < 4:
        raise UsageError(f"sequence scoring needs at least 4 frames, got {len(preds)}")
    js = [jaccard(p, g) for p, g in zip(preds, gts)]
    q = len(js) // 4
    return SequenceScore(
        per_frame_j=js,
        mean_j=float(np.mean(js)),
        recall_j=float(np.mean([j > 0.5 for j in js])),
        decay_j=float(np.mean(js[:q]) - np.mean(js[-q:])),
    )


def aggregate_mean_j(scores: dict) -> float:
    if not scores:
        raise UsageError("no sequences to aggregate")
    return float(np.mean([s.mean_j for s in scores.values()]))


def write_report_json(scores: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        name: {
            "mean_j": s.mean_j,
            "recall_j": s.recall_j,
            "decay_j": s.decay_j,
            "per_frame_j": s.per_frame_j,
        }
        for name, s in scores.items()
    }
    payload["_aggregate"] = {"mean_j": aggregate_mean_j(scores)}
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def write_report_csv(scores: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sequence", "mean_j", "recall_j", "decay_j"])
        for name in sorted(scores):
            s = scores[name]
            writer.writerow([name, repr(s.mean_j), repr(s.recall_j), repr(s.decay_j)])
        writer.writerow(["_aggregate", repr(aggregate_mean_j(scores)), "", ""])


def format_table(scores: dict) -> str:
    rows = [("sequence", "mean J", "recall J", "decay J")]
    for name in sorted(scores):
        s = scores[name]
        rows.append((name, f"{s.mean_j:.4f}", f"{s.recall_j:.4f}", f"{s.decay_j:.4f}"))
    rows.append(("aggregate", f"{aggregate_mean_j(scores):.4f}", "", ""))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)

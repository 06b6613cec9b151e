"""Average precision with all-point interpolation and greedy IoU matching (PASCAL VOC 2010 style)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .detection import BACKGROUND, iou_matrix

__all__ = ["Detection", "EvalReport", "average_precision", "all_point_ap", "score_report"]


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: tuple
    cls: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def all_point_ap(recall, precision) -> float:
    """Area under the monotone precision envelope of a PR curve."""
    mrec = np.concatenate([[0.0], np.asarray(recall, dtype=np.float64), [1.0]])
    mpre = np.concatenate([[0.0], np.asarray(precision, dtype=np.float64), [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(detections: Sequence, ground_truths: Mapping[str, np.ndarray],
                      iou_threshold: float = 0.5) -> float:
    """AP of one class.

    ``detections`` are ``(image_id, score, box)`` triples, ranked by
    descending score with ties kept in input order. ``ground_truths`` maps
    image ids to (n, 4) corner arrays. Each detection is matched to the
    ground truth of highest IoU in its image, claimed or not. It counts as a
    true positive only if that IoU reaches the threshold and the ground
    truth has not been claimed yet, so duplicates are false positives.
    Returns NaN when there are no ground truths.
    """
    gts = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in ground_truths.items()}
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return float("nan")
    if len(detections) == 0:
        return 0.0
    scores = np.array([d[1] for d in detections], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    claimed = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        image_id, _, box = detections[i]
        cand = gts.get(image_id)
        if cand is None or len(cand) == 0:
            continue
        overlaps = iou_matrix(np.asarray(box, dtype=np.float64), cand)[0]
        j = int(np.argmax(overlaps))
        if overlaps[j] >= iou_threshold and not claimed[image_id][j]:
            claimed[image_id][j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    return all_point_ap(recall, precision)


@dataclass
class EvalReport:
    ap: dict[str, float] = field(default_factory=dict)
    n_gt: dict[str, int] = field(default_factory=dict)
    n_det: dict[str, int] = field(default_factory=dict)

    @property
    def mAP(self) -> float:
        vals = [self.ap[c] for c in self.ap if self.n_gt.get(c, 0) > 0]
        return float(np.mean(vals)) if vals else float("nan")

    def to_text(self) -> str:
        lines = [f"{c}\t{self.ap[c]!r}\t{self.n_gt[c]}\t{self.n_det[c]}" for c in self.ap]
        lines.append(f"mAP\t{self.mAP!r}")
        return "\n".join(lines) + "\n"


def score_report(images, scores: Mapping[str, np.ndarray], classes: Sequence[str],
                 iou_threshold: float = 0.5) -> EvalReport:
    """Evaluate per-proposal class scores against the labelled proposals.

    ``images`` is a sequence of dataset images; ``scores[image_id]`` holds one
    row per proposal and one column per entry of ``classes``. Every labelled
    foreground proposal is a ground-truth object and every (proposal, class)
    score is a detection. A background column, if present, is never
    evaluated.
    """
    report = EvalReport()
    ordered = sorted(images, key=lambda im: im.image_id)
    for j, c in enumerate(classes):
        if c == BACKGROUND:
            continue
        dets, gts = [], {}
        for img in ordered:
            boxes = [p.box.as_tuple() for p in img.proposals]
            s = np.asarray(scores[img.image_id])[:, j]
            dets.extend((img.image_id, float(s[i]), boxes[i]) for i in range(len(boxes)))
            gts[img.image_id] = np.array([p.box.as_tuple() for p in img.proposals if p.label == c],
                                         dtype=np.float64).reshape(-1, 4)
        report.ap[c] = average_precision(dets, gts, iou_threshold)
        report.n_gt[c] = int(sum(len(v) for v in gts.values()))
        report.n_det[c] = len(dets)
    return report

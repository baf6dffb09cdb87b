"""Mask metrics: per-frame IoU (averaged to mIoU) and F-beta from pooled counts."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

DEFAULT_BETA_SQ = 0.3


def _mean(values: list) -> float:
    # plain left-to-right sum: fixed reduction order regardless of length
    return float(sum(values) / len(values))


def _check(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def iou(pred_mask, gt_mask) -> float:
    """|pred & gt| / |pred | gt|, with empty-vs-empty defined as 1."""
    pred, gt = _check(pred_mask, gt_mask)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def f_from_counts(tp: int, fp: int, fn: int, beta_sq: float = DEFAULT_BETA_SQ) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    denom = beta_sq * precision + recall
    return (1 + beta_sq) * precision * recall / denom if denom else 0.0


def fscore(pred_mask, gt_mask, beta_sq: float = DEFAULT_BETA_SQ) -> float:
    pred, gt = _check(pred_mask, gt_mask)
    tp = np.count_nonzero(pred & gt)
    return f_from_counts(tp, np.count_nonzero(pred & ~gt), np.count_nonzero(~pred & gt), beta_sq)


@dataclass
class EvalReport:
    miou: float
    fscore: float
    frames: int
    per_clip: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["clip_id", "frames", "miou", "fscore"])
            w.writeheader()
            for row in self.per_clip:
                w.writerow(row)


def report_from_masks(preds: list, gts: list, clip_ids: Optional[list] = None,
                      beta_sq: float = DEFAULT_BETA_SQ) -> EvalReport:
    """Aggregate binary predictions: mIoU = mean of per-frame IoU, F from pooled TP/FP/FN."""
    if not preds:
        raise ValueError("cannot evaluate an empty split")
    clip_ids = clip_ids or ["all"] * len(preds)
    ious, tp, fp, fn = [], 0, 0, 0
    per: dict = {}
    for pred, gt, cid in zip(preds, gts, clip_ids):
        p, g = _check(pred, gt)
        v = iou(p, g)
        ious.append(v)
        counts = (np.count_nonzero(p & g), np.count_nonzero(p & ~g), np.count_nonzero(~p & g))
        tp, fp, fn = tp + counts[0], fp + counts[1], fn + counts[2]
        row = per.setdefault(cid, {"ious": [], "c": [0, 0, 0]})
        row["ious"].append(v)
        row["c"] = [a + b for a, b in zip(row["c"], counts)]
    per_clip = [{"clip_id": cid, "frames": len(r["ious"]), "miou": _mean(r["ious"]),
                 "fscore": f_from_counts(*r["c"], beta_sq)} for cid, r in per.items()]
    return EvalReport(miou=_mean(ious), fscore=f_from_counts(tp, fp, fn, beta_sq),
                      frames=len(ious), per_clip=per_clip)


def evaluate(predict_fn: Callable, clips: list, flows: Optional[dict] = None,
             threshold: float = 0.5, beta_sq: float = DEFAULT_BETA_SQ) -> EvalReport:
    """Score every annotated frame of ``clips``.

    ``predict_fn(images, flows, audio, ids) -> probabilities [N,H,W]``; ``flows``
    maps (clip index, frame) to model-ready flow arrays and may be None when the
    predictor handles flow itself.
    """
    if not clips:
        raise ValueError("cannot evaluate an empty split")
    ids, images, audio, gts, cids = [], [], [], [], []
    for ci, clip in enumerate(clips):
        if len(clip.labeled_indices) != clip.num_frames:
            raise ValueError(f"clip {clip.clip_id} lacks ground truth for some frames")
        for t in clip.labeled_indices:
            ids.append((ci, t))
            images.append(clip.frames[t])
            audio.append(clip.audio[t])
            gts.append(clip.mask(t))
            cids.append(clip.clip_id)
    fl = np.stack([flows[i] for i in ids]) if flows is not None else None
    probs = predict_fn(np.stack(images), fl, np.stack(audio), ids)
    preds = [p >= threshold for p in probs]
    return report_from_masks(preds, gts, cids, beta_sq)

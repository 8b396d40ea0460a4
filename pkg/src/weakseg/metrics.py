"""Recognition and segmentation metrics: AR / CR, NED, box-level F1."""
from __future__ import annotations

import json

import numpy as np

from .align import DEL, INS, SUB, align
from .types import interval_iou


def edit_counts(pred, gt) -> tuple[int, int, int]:
    """(deletions, substitutions, insertions) of one optimal alignment."""
    if len(gt) == 0:
        raise ValueError("ground truth must be non-empty")
    _, ops = align(pred, gt)
    kinds = [k for k, _, _ in ops]
    return kinds.count(DEL), kinds.count(SUB), kinds.count(INS)


def ar_cr(pairs) -> tuple[float, float]:
    """Accurate rate and correct rate aggregated over (pred, gt) pairs."""
    n_t = d = s = i = 0
    for pred, gt in pairs:
        de, se, ie = edit_counts(pred, gt)
        n_t += len(gt)
        d, s, i = d + de, s + se, i + ie
    if n_t == 0:
        raise ValueError("no ground-truth characters")
    return (n_t - d - s - i) / n_t, (n_t - d - s) / n_t


def ar_cr_from_counts(n_t, d, s, i) -> tuple[float, float]:
    return (n_t - d - s - i) / n_t, (n_t - d - s) / n_t


def ned_single(pred, gt) -> float:
    if len(gt) == 0:
        raise ValueError("ground truth must be non-empty")
    dist, _ = align(pred, gt)
    return 1.0 - dist / max(len(pred), len(gt))


def ned(pairs) -> float:
    """Mean of 1 - dist / max(|pred|, |gt|) over samples."""
    scores = [ned_single(p, g) for p, g in pairs]
    return float(np.mean(scores))


def seg_quality(pred_boxes, gt_boxes, iou_thresh=0.5) -> dict:
    """Greedy left-to-right matching on horizontal IoU.

    Each predicted box (in x order) takes the unmatched ground-truth box with
    the highest positive IoU (ties: leftmost). ``mean_iou`` averages all
    matched pairs; a pair counts as a true positive when IoU >= ``iou_thresh``.
    """
    used = [False] * len(gt_boxes)
    ious = []
    for p in pred_boxes:
        best, best_iou = -1, 0.0
        for k, g in enumerate(gt_boxes):
            if used[k]:
                continue
            v = interval_iou(p.x_min, p.x_max, g.x_min, g.x_max)
            if v > best_iou:
                best, best_iou = k, v
        if best >= 0:
            used[best] = True
            ious.append(best_iou)
    tp = sum(v >= iou_thresh for v in ious)
    precision = tp / len(pred_boxes) if pred_boxes else 0.0
    recall = tp / len(gt_boxes) if gt_boxes else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"tp": tp, "n_pred": len(pred_boxes), "n_gt": len(gt_boxes), "matches": len(ious),
            "mean_iou": float(np.mean(ious)) if ious else 0.0,
            "precision": precision, "recall": recall, "f1": f1, "ious": ious}


def report(rows) -> dict:
    """Aggregate report. ``rows``: dicts with id, pred, gt and optional
    pred_boxes / gt_boxes (CharBox lists)."""
    n_t = d = s = i = 0
    per = []
    tp = n_pred = n_gt = 0
    ious = []
    for r in rows:
        de, se, ie = edit_counts(r["pred"], r["gt"])
        n_t += len(r["gt"])
        d, s, i = d + de, s + se, i + ie
        row = {"id": r["id"], "pred": list(map(int, r["pred"])), "gt": list(map(int, r["gt"])),
               "D": de, "S": se, "I": ie, "ned": ned_single(r["pred"], r["gt"])}
        if r.get("gt_boxes") is not None and r.get("pred_boxes") is not None:
            q = seg_quality(r["pred_boxes"], r["gt_boxes"])
            tp, n_pred, n_gt = tp + q["tp"], n_pred + q["n_pred"], n_gt + q["n_gt"]
            ious.extend(q["ious"])
            row["seg_f1"] = q["f1"]
        per.append(row)
    ar, cr = ar_cr_from_counts(n_t, d, s, i)
    out = {"AR": ar, "CR": cr, "NED": float(np.mean([r["ned"] for r in per])),
           "N_t": n_t, "D": d, "S": s, "I": i, "per_sample": per}
    if n_gt:
        precision = tp / n_pred if n_pred else 0.0
        recall = tp / n_gt
        out["seg_precision"] = precision
        out["seg_recall"] = recall
        out["seg_f1"] = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out["mean_iou"] = float(np.mean(ious)) if ious else 0.0
    return out


def write_report(path, rep):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rep, fh, indent=1, sort_keys=True)


def format_table(rep) -> str:
    keys = [k for k in ("AR", "CR", "NED", "seg_f1", "mean_iou") if k in rep]
    lines = [f"{k:>8s}  {rep[k]:.4f}" for k in keys]
    lines.append(f"{'N_t':>8s}  {rep['N_t']}   D={rep['D']} S={rep['S']} I={rep['I']}")
    return "\n".join(lines)

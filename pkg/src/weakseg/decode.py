"""Transcription from a prediction grid: NMS, CTC-style frames, LM beam search,
and assigning trajectory points to decoded characters."""
from __future__ import annotations

import json
from collections import defaultdict

import numpy as np

from .model import PredictionGrid
from .types import CharBox, interval_iou

LOC_WEIGHT = 0.8


def candidate_scores(grid: PredictionGrid, loc_weight=LOC_WEIGHT) -> np.ndarray:
    return loc_weight * grid.p_loc + (1.0 - loc_weight) * grid.p_cls.max(axis=1)


def greedy_nms(boxes, scores, iou_thresh) -> list[int]:
    """Indices kept by greedy suppression on horizontal-interval IoU.

    Candidates are visited by descending score (ties: lower index first); a
    candidate is dropped when its IoU with any kept one is >= ``iou_thresh``.
    """
    order = sorted(range(len(scores)), key=lambda k: (-scores[k], k))
    keep: list[int] = []
    for k in order:
        x0, x1 = boxes[k][0], boxes[k][2]
        if all(interval_iou(x0, x1, boxes[m][0], boxes[m][2]) < iou_thresh for m in keep):
            keep.append(k)
    return keep


def nms_transcribe(grid: PredictionGrid, loc_weight=LOC_WEIGHT, iou_thresh=0.5,
                   score_thresh=0.5) -> tuple[list[CharBox], list[int]]:
    """Segmentation R_seg (boxes with NMS scores) and recognition R_rec."""
    scores = candidate_scores(grid, loc_weight)
    boxes = grid.boxes()
    live = [n for n in range(grid.w_enc)
            if scores[n] >= score_thresh and boxes[n, 2] > boxes[n, 0] and boxes[n, 3] > boxes[n, 1]]
    kept = greedy_nms(boxes[live], scores[live], iou_thresh)
    regions = [live[k] for k in kept]
    regions.sort(key=lambda n: (0.5 * (boxes[n, 0] + boxes[n, 2]), n))
    seg, rec = [], []
    for n in regions:
        cls = int(np.argmax(grid.p_cls[n]))
        seg.append(CharBox(*(float(v) for v in boxes[n]), class_id=cls,
                           score=float(min(max(scores[n], 0.0), 1.0))))
        rec.append(cls)
    return seg, rec


# ------------------------------------------------------------------ CTC-style decoding


def to_ctc_frames(grid: PredictionGrid) -> np.ndarray:
    """(w_enc, 1 + n_cls) frames; column 0 is blank = 1 - p_loc."""
    loc = grid.p_loc[:, None]
    return np.concatenate([1.0 - loc, loc * grid.p_cls], axis=1)


def greedy_ctc(frames) -> list[int]:
    best = np.argmax(frames, axis=1)
    out, prev = [], 0
    for b in best:
        if b != 0 and b != prev:
            out.append(int(b) - 1)
        prev = b
    return out


def beam_search_lm(frames, lm=None, beam_width=16, lm_weight=0.3) -> list[int]:
    """CTC prefix beam search; each label extension adds
    ``lm_weight * log P(label | previous two labels)``.

    Beams are ranked by total log score with ties broken by the
    lexicographically smaller prefix.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    with np.errstate(divide="ignore"):
        logf = np.log(np.asarray(frames, dtype=np.float64))
    n_cls = logf.shape[1] - 1
    use_lm = lm is not None and lm_weight != 0
    neg = -np.inf
    beams = {(): (0.0, neg)}  # prefix -> (log p ending in blank, log p ending in label)
    for t in range(logf.shape[0]):
        row = logf[t]
        labels = [c for c in range(n_cls) if row[c + 1] > neg]
        nxt = defaultdict(lambda: [neg, neg])
        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            entry = nxt[prefix]
            entry[0] = np.logaddexp(entry[0], total + row[0])
            last = prefix[-1] if prefix else None
            if last is not None:
                entry[1] = np.logaddexp(entry[1], pnb + row[last + 1])
            for c in labels:
                ext = prefix + (c,)
                bonus = lm_weight * lm.logp(c, prefix[-2:]) if use_lm else 0.0
                src = pb if c == last else total
                e = nxt[ext]
                e[1] = np.logaddexp(e[1], src + row[c + 1] + bonus)
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = {k: tuple(v) for k, v in ranked[:beam_width] if np.logaddexp(*v) > neg}
        if not beams:
            return []
    best = min(beams.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
    return list(best[0])


# ------------------------------------------------------------------ online point assignment

UNASSIGNED = -1


def assign_points(points, boxes) -> np.ndarray:
    """Character index per trajectory point: the box at smallest Euclidean
    distance to its boundary (0 inside), ties to the leftmost box."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not boxes:
        return np.full(len(pts), UNASSIGNED, dtype=np.int64)
    b = np.array([[bx.x_min, bx.y_min, bx.x_max, bx.y_max] for bx in boxes])
    dx = np.maximum(np.maximum(b[None, :, 0] - pts[:, None, 0], 0.0), pts[:, None, 0] - b[None, :, 2])
    dy = np.maximum(np.maximum(b[None, :, 1] - pts[:, None, 1], 0.0), pts[:, None, 1] - b[None, :, 3])
    return np.argmin(np.hypot(dx, dy), axis=1)


# ------------------------------------------------------------------ output file


def decoded_record(sample_id, transcript, boxes) -> str:
    return json.dumps({"id": sample_id, "transcript": list(map(int, transcript)),
                       "boxes": [b.to_list() for b in boxes]})


def read_decoded(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    for r in rows:
        r["boxes"] = [CharBox.from_list(b) for b in r["boxes"]]
    return rows

"""Inference over datasets: decoding, evaluation rows, reports."""
from __future__ import annotations

import numpy as np

from .decode import beam_search_lm, nms_transcribe, to_ctc_frames
from .metrics import report
from .model import Recognizer
from .pathsig import render_signature_map
from .preprocess import Trajectory, preprocess_raster, resample_equidistant, trajectory_transform
from .types import CharBox, TextLineSample


def _map_box(apply, b: CharBox) -> CharBox:
    corners = apply([[b.x_min, b.y_min], [b.x_max, b.y_min], [b.x_min, b.y_max], [b.x_max, b.y_max]])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    return CharBox(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]), b.class_id, b.score)


SIG_WINDOW = 9


def scale_signature_map(m, window=SIG_WINDOW):
    """Divide level-k terms by (window - 1)^k, the k-th power of the longest
    window path at unit resampling step, so every channel is O(1)."""
    out = m.copy()
    out[..., 1:3] /= window - 1
    out[..., 3:] /= (window - 1) ** 2
    return out


def prepare(sample, height=32):
    """(model input, ground-truth boxes in the input's frame or None).

    Trajectories are deskewed, scaled to ``height``, resampled and rendered
    as signature maps; their boxes follow the same transform. Rasters that
    already have ``height`` rows pass through untouched; others go through
    the raster normalization and lose their boxes.
    """
    x = sample.input
    if isinstance(x, Trajectory):
        apply = trajectory_transform(x, height)
        t = resample_equidistant(Trajectory([apply(s) for s in x.strokes]))
        boxes = None if sample.boxes is None else [_map_box(apply, b) for b in sample.boxes]
        return scale_signature_map(render_signature_map(t, window=SIG_WINDOW, height=height)), boxes
    x = np.asarray(x)
    if x.ndim == 2 and x.shape[0] != height:
        return preprocess_raster(x, height), None
    return x, sample.boxes


def as_model_sample(sample, height=32) -> TextLineSample:
    """Sample whose input is exactly what the network consumes."""
    x, boxes = prepare(sample, height)
    return TextLineSample(x, sample.transcript, boxes, sample.id, dict(sample.meta))


def decode_input(model: Recognizer, x, lm=None, beam_width=16, lm_weight=0.3):
    """(boxes, transcript) for a prepared input. Boxes always come from
    NMS; the transcript comes from the CTC beam search when an LM is given."""
    grid = model.predict(x)
    seg, rec = nms_transcribe(grid)
    if lm is not None:
        rec = beam_search_lm(to_ctc_frames(grid), lm, beam_width, lm_weight)
    return seg, rec


def decode_sample(model: Recognizer, sample, lm=None, beam_width=16, lm_weight=0.3):
    return decode_input(model, prepare(sample, model.config.height)[0], lm, beam_width, lm_weight)


def evaluate(model: Recognizer, samples, lm=None, beam_width=16, lm_weight=0.3) -> dict:
    rows = []
    for s in samples:
        x, gt_boxes = prepare(s, model.config.height)
        seg, rec = decode_input(model, x, lm, beam_width, lm_weight)
        rows.append({"id": s.id, "pred": rec, "gt": s.transcript, "pred_boxes": seg,
                     "gt_boxes": gt_boxes})
    return report(rows)


def report_from_decoded(decoded, samples, height=32) -> dict:
    """Same report as :func:`evaluate`, from decoded records keyed by id."""
    by_id = {d["id"]: d for d in decoded}
    rows = []
    for s in samples:
        d = by_id.get(s.id)
        if d is None:
            raise KeyError(f"no decoded output for sample {s.id!r}")
        rows.append({"id": s.id, "pred": d["transcript"], "gt": s.transcript,
                     "pred_boxes": d["boxes"], "gt_boxes": prepare(s, height)[1]})
    return report(rows)


def median(values):
    return float(np.median(np.asarray(values, dtype=np.float64)))

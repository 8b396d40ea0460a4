"""Weak supervision from transcripts: edit-distance matching, pseudo-box
bookkeeping, region assignment and the partially supervised losses."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffnet as dn
from .align import MATCH, align
from .model import encode_box, region_of
from .types import CharBox

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]   # (prediction index, ground-truth index)
    edit_distance: int


def match(rec, gt) -> MatchResult:
    if len(gt) == 0:
        raise ValueError("ground truth must be non-empty")
    dist, ops = align(rec, gt)
    return MatchResult([(i, j) for kind, i, j in ops if kind == MATCH], dist)


def lambda_pse(b_sco, r_sco) -> float:
    """Weight of the stored box: e^{10 b} / (e^{10 b} + e^{10 r})."""
    # logistic form of the same ratio, stable for any inputs
    return 1.0 / (1.0 + math.exp(10.0 * (r_sco - b_sco)))


# ------------------------------------------------------------------ pseudo-box store


class PseudoBoxStore:
    """Per-sample list of pseudo boxes; each entry is None or (box[4], score)."""

    def __init__(self):
        self.entries: dict[str, list] = {}

    def get(self, sample_id, length) -> list:
        ent = self.entries.get(sample_id)
        if ent is None:
            ent = self.entries[sample_id] = [None] * length
        elif len(ent) != length:
            raise ValueError(f"{sample_id}: store has {len(ent)} entries, transcript has {length}")
        return ent

    def filled(self, sample_id) -> int:
        return sum(e is not None for e in self.entries.get(sample_id, []))

    def to_tensors(self) -> dict[str, np.ndarray]:
        """Rows (x0, y0, x1, y1, score); all-NaN rows mark empty entries."""
        out = {}
        for sid, ent in self.entries.items():
            rows = np.full((len(ent), 5), np.nan)
            for j, e in enumerate(ent):
                if e is not None:
                    rows[j, :4] = e[0]
                    rows[j, 4] = e[1]
            out[f"pseudo/{sid}"] = rows
        return out

    @classmethod
    def from_tensors(cls, tensors) -> "PseudoBoxStore":
        store = cls()
        for key, rows in tensors.items():
            if not key.startswith("pseudo/"):
                continue
            store.entries[key[7:]] = [None if np.isnan(r[4]) else (r[:4].copy(), float(r[4]))
                                      for r in rows]
        return store


def update_pseudo_boxes(store: PseudoBoxStore, sample_id, result: MatchResult, seg, gt_len):
    """Fold the boxes of "equal"-matched predictions into the store."""
    entries = store.get(sample_id, gt_len)
    for i, j in result.pairs:
        if i >= len(seg):
            raise IndexError(f"matched prediction {i} has no segmentation box")
        r_box = np.array(seg[i].coords(), dtype=np.float64)
        r_sco = float(seg[i].score)
        if not 0.0 <= r_sco <= 1.0:
            raise ValueError(f"prediction score {r_sco} outside [0, 1]")
        if entries[j] is None:
            entries[j] = (r_box, r_sco)
            continue
        b_box, b_sco = entries[j]
        lam = lambda_pse(b_sco, r_sco)
        entries[j] = (lam * b_box + (1.0 - lam) * r_box, lam * b_sco + (1.0 - lam) * r_sco)
    return store


def text_length_update(store: PseudoBoxStore, sample_id, seg, rec, gt):
    """Ablation baseline: replace all pseudo boxes when the lengths agree."""
    entries = store.get(sample_id, len(gt))
    if len(rec) == len(gt):
        for j, b in enumerate(seg):
            entries[j] = (np.array(b.coords(), dtype=np.float64), float(b.score))
    return store


# ------------------------------------------------------------------ region assignment


@dataclass
class RegionAssignment:
    m_ptr: list[tuple[int, int]]          # (ground-truth index j, region n)
    t_loc: list[int]
    n_loc: list[int]
    ignored: list[int]
    dropped: list[tuple[int, int]] = field(default_factory=list)


def assign_regions(entries, w_enc, region_width) -> RegionAssignment:
    regions = [None if e is None else region_of(0.5 * (e[0][0] + e[0][2]), region_width, w_enc)
               for e in entries]
    m_ptr, taken, dropped = [], {}, []
    for j, n in enumerate(regions):
        if n is None:
            continue
        if n in taken:
            dropped.append((j, n))
            log.debug("region %d already holds character %d; dropping %d", n, taken[n], j)
            continue
        taken[n] = j
        m_ptr.append((j, n))
    t_loc = sorted(taken)
    neg = set()
    for j in range(len(regions) - 1):
        a, b = regions[j], regions[j + 1]
        if a is None or b is None:
            continue
        lo, hi = min(a, b), max(a, b)
        neg.update(range(lo + 1, hi))
    n_loc = sorted(neg - set(t_loc))
    known = set(t_loc) | set(n_loc)
    ignored = [n for n in range(w_enc) if n not in known]
    return RegionAssignment(m_ptr, t_loc, n_loc, ignored, dropped)


def supervise_full(boxes, transcript, w_enc, region_width):
    """Ground-truth boxes as a fully populated store (score 1); every region
    without a character center is negative."""
    if boxes is None or len(boxes) != len(transcript):
        raise ValueError("full supervision needs exactly one box per transcript character")
    entries = [(np.array(b.coords(), dtype=np.float64), 1.0) for b in boxes]
    a = assign_regions(entries, w_enc, region_width)
    t = set(a.t_loc)
    n_loc = [n for n in range(w_enc) if n not in t]
    return RegionAssignment(a.m_ptr, a.t_loc, n_loc, [], a.dropped), entries


# ------------------------------------------------------------------ losses


@dataclass
class LossTerms:
    l_bbox: dn.Tensor
    l_cls: dn.Tensor
    l_loc: dn.Tensor
    l_conr: dn.Tensor | None
    l_total: dn.Tensor

    def values(self) -> dict[str, float]:
        out = {"l_bbox": self.l_bbox.item(), "l_cls": self.l_cls.item(),
               "l_loc": self.l_loc.item(), "l_total": self.l_total.item()}
        if self.l_conr is not None:
            out["l_conr"] = self.l_conr.item()
        return out


def _zero():
    return dn.Tensor(0.0)


def _neg_mean_log(probs, flat_idx):
    if len(flat_idx) == 0:
        return _zero()
    return -dn.mean(dn.log(dn.take(probs, flat_idx), floor=PROB_FLOOR))


def compute_losses(p_loc, p_bbox, p_cls, assignment: RegionAssignment, entries, gt,
                   region_width, height, p_cls_ctx=None) -> LossTerms:
    """Per-sample losses. Inputs are tensors (or arrays) for ONE line: p_loc
    (w,), p_bbox (w, 4), p_cls (w, C), optional p_cls_ctx (w, C).

    l_bbox: mean over M_ptr of summed squared error in raw box-encoding space.
    l_cls / l_conr: mean negative log-likelihood of the transcript class.
    l_loc: 0.5-weighted positive and negative log terms; empty sets add 0.
    """
    p_loc, p_bbox, p_cls = dn.as_tensor(p_loc), dn.as_tensor(p_bbox), dn.as_tensor(p_cls)
    n_cls = p_cls.shape[1]
    pairs = assignment.m_ptr
    if pairs:
        regs = np.array([n for _, n in pairs])
        targets = np.stack([encode_box(n, entries[j][0], region_width, height) for j, n in pairs])
        bbox_idx = (regs[:, None] * 4 + np.arange(4)[None, :]).reshape(-1)
        diff = dn.sub(dn.take(p_bbox, bbox_idx), targets.reshape(-1))
        l_bbox = dn.sum(dn.square(diff)) / len(pairs)
        cls_idx = np.array([n * n_cls + gt[j] for j, n in pairs])
    else:
        l_bbox = _zero()
        cls_idx = np.zeros(0, dtype=np.int64)
    l_cls = _neg_mean_log(p_cls, cls_idx)

    l_loc = _zero()
    if assignment.t_loc:
        l_loc = l_loc + 0.5 * _neg_mean_log(p_loc, np.array(assignment.t_loc))
    if assignment.n_loc:
        l_loc = l_loc + 0.5 * _neg_mean_log(dn.sub(1.0, p_loc), np.array(assignment.n_loc))

    total = dn.add(dn.add(l_bbox, l_cls), l_loc)
    l_conr = None
    if p_cls_ctx is not None:
        l_conr = _neg_mean_log(dn.as_tensor(p_cls_ctx), cls_idx)
        total = dn.add(total, l_conr)
    return LossTerms(l_bbox, l_cls, l_loc, l_conr, total)

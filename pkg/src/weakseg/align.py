"""Unit-cost Levenshtein alignment with a fixed backtrace order.

Rows index the prediction, columns the ground truth. Backtrace prefers,
in order: match, substitution, deletion (a ground-truth symbol missing
from the prediction), insertion (an extra predicted symbol). Both the
pseudo-box matcher and the AR/CR metrics use this one alignment.
"""
from __future__ import annotations

import numpy as np

MATCH, SUB, DEL, INS = "match", "sub", "del", "ins"


def distance_table(pred, gt) -> np.ndarray:
    n, m = len(pred), len(gt)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        pi = pred[i - 1]
        for j in range(1, m + 1):
            cost = 0 if pi == gt[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i - 1, j] + 1, d[i, j - 1] + 1)
    return d


def align(pred, gt) -> tuple[int, list[tuple[str, int, int]]]:
    """Return (distance, ops); each op is (kind, i, j) with 0-based indices
    (-1 where the op consumes nothing on that side), in left-to-right order."""
    pred, gt = list(pred), list(gt)
    d = distance_table(pred, gt)
    i, j = len(pred), len(gt)
    ops = []
    while i > 0 or j > 0:
        here = d[i, j]
        if i > 0 and j > 0 and pred[i - 1] == gt[j - 1] and d[i - 1, j - 1] == here:
            ops.append((MATCH, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and d[i - 1, j - 1] + 1 == here:
            ops.append((SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j - 1] + 1 == here:
            ops.append((DEL, -1, j - 1))
            j -= 1
        else:
            ops.append((INS, i - 1, -1))
            i -= 1
    ops.reverse()
    return int(d[-1, -1]), ops

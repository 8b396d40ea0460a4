"""Truncated (order 2) path signatures of pen trajectories, rendered as
image-like feature maps.

Channel layout: [S0, S1x, S1y, S2xx, S2xy, S2yx, S2yy].
"""
from __future__ import annotations

import struct

import numpy as np

from .preprocess import Trajectory

N_CHANNELS = 7
SIGMAP_MAGIC = b"SIGMAP01"


def signature_segment(points) -> np.ndarray:
    """Order-2 signature of the piecewise-linear path through ``points``.

    Built by Chen's identity: each linear piece has S1 = d, S2 = d (x) d / 2,
    and concatenation adds S1(prefix) (x) d.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.zeros(N_CHANNELS)
    out[0] = 1.0
    if len(p) < 2:
        return out
    d = np.diff(p, axis=0)
    prefix = np.cumsum(d, axis=0) - d  # S1 accumulated before each piece
    s2 = prefix.T @ d + 0.5 * d.T @ d
    out[1:3] = d.sum(axis=0)
    out[3:] = s2.reshape(-1)
    return out


def chen_concat(a, b) -> np.ndarray:
    """Signature of the concatenated path from the two pieces' signatures."""
    out = np.empty(N_CHANNELS)
    out[0] = 1.0
    out[1:3] = a[1:3] + b[1:3]
    out[3:] = a[3:] + b[3:] + np.outer(a[1:3], b[1:3]).reshape(-1)
    return out


def window_signatures(stroke, window=9) -> np.ndarray:
    """Signature of the ``window``-point sub-path centred on each point
    (clipped at the stroke ends)."""
    s = np.asarray(stroke, dtype=np.float64).reshape(-1, 2)
    half = window // 2
    out = np.empty((len(s), N_CHANNELS))
    for k in range(len(s)):
        out[k] = signature_segment(s[max(0, k - half):k + half + 1])
    return out


def render_signature_map(t: Trajectory, window=9, height=32, width=None) -> np.ndarray:
    """(height, width, 7) map; every pen-path pixel holds its window signature.

    Windows never cross pen-up gaps. When several points fall on one pixel
    the later point in writing order wins.
    """
    pts = t.points()
    if len(pts) == 0:
        raise ValueError("empty trajectory")
    cols = np.rint(pts[:, 0]).astype(np.int64)
    if cols.min() < 0:
        raise ValueError("trajectory has negative x; normalize first")
    if width is None:
        width = int(cols.max()) + 1
    out = np.zeros((height, width, N_CHANNELS))
    for stroke in t.strokes:
        sig = window_signatures(stroke, window)
        r = np.clip(np.rint(stroke[:, 1]).astype(np.int64), 0, height - 1)
        c = np.clip(np.rint(stroke[:, 0]).astype(np.int64), 0, width - 1)
        for k in range(len(stroke)):
            out[r[k], c[k]] = sig[k]
    return out


def save_signature_map(path, sig_map):
    """Header: magic, u32 channels, u32 height, u32 width; then channel-major
    little-endian float64 planes."""
    h, w, c = sig_map.shape
    planes = np.ascontiguousarray(np.transpose(sig_map, (2, 0, 1)), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(SIGMAP_MAGIC + struct.pack("<III", c, h, w) + planes.tobytes())


def load_signature_map(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != SIGMAP_MAGIC:
        raise ValueError(f"{path}: not a signature map file")
    c, h, w = struct.unpack_from("<III", buf, 8)
    expected = 20 + 8 * c * h * w
    if len(buf) != expected:
        raise ValueError(f"{path}: size {len(buf)} != expected {expected}")
    planes = np.frombuffer(buf, dtype="<f8", offset=20).reshape(c, h, w)
    return np.transpose(planes, (1, 2, 0)).astype(np.float64)

"""
Online trajectories as signature maps
=====================================

A synthetic pen trajectory is normalized, resampled and turned into the
7-plane windowed signature map the recognizer reads for online input.
"""

import numpy as np

from weakseg.pathsig import N_CHANNELS, chen_concat, render_signature_map, signature_segment
from weakseg.pipeline import prepare
from weakseg.preprocess import preprocess_trajectory
from weakseg.synth import GlyphBank, synth_online_line

# level-2 terms of a straight segment are d d^T / 2
d = np.array([3.0, -1.0])
print(signature_segment([[0, 0], d]))

# splicing two polylines multiplies their signatures
rng = np.random.default_rng(0)
p = np.cumsum(rng.normal(size=(6, 2)), axis=0)
q = np.cumsum(rng.normal(size=(5, 2)), axis=0)
q = q - q[0] + p[-1]
whole = signature_segment(np.vstack([p, q[1:]]))
print("chen gap", np.abs(whole - chen_concat(signature_segment(p), signature_segment(q))).max())

bank = GlyphBank.build(n_cls=20, seed=0)
line = synth_online_line(bank, [3, 1, 4, 1, 5], seed=2, sample_id="on0")
print("strokes", len(line.input.strokes), "points", sum(len(s) for s in line.input.strokes))

t = preprocess_trajectory(line.input, target_h=32)
m = render_signature_map(t, window=9, height=32)
print("map", m.shape, "channels", N_CHANNELS, "ink pixels", int(m[..., 0].sum()))

# the network input: same map with per-level scaling, boxes carried along
x, boxes = prepare(line)
print("input", x.shape, "per-channel max |.|", np.abs(x).reshape(-1, N_CHANNELS).max(axis=0).round(2))
print("boxes", [(round(b.x_min, 1), round(b.x_max, 1)) for b in boxes])

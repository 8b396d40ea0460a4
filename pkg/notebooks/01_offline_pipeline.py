"""
Offline lines: synthesis, a short training run, decoding
========================================================

Renders a few clean and distorted text lines from the toy glyph bank,
pretrains a small recognizer for a few hundred steps and decodes a line
with and without the character language model.
Run time is a couple of minutes on a laptop CPU.
"""

import dataclasses

import numpy as np
from PIL import Image

from weakseg.pipeline import decode_sample, evaluate
from weakseg.synth import GlyphBank, distorted_config, sample_text, synth_offline_line
from weakseg.train import SynthSource, TrainConfig, pretrain, toy_lm

# a 20-class glyph bank and a toy corpus LM used to pick the text
bank = GlyphBank.build(n_cls=20, seed=0)
lm = toy_lm(20)
text = sample_text(20, (6, 9), 1, lm)
clean = synth_offline_line(bank, text, seed=1, sample_id="clean")
rough = synth_offline_line(bank, text, seed=1, cfg=distorted_config(), sample_id="rough")
print("text", text)
print("raster", clean.input.shape, "boxes", [(round(b.x_min), round(b.x_max)) for b in clean.boxes])

# stack both lines into one picture for a quick look
w = max(clean.input.shape[1], rough.input.shape[1])
pad = lambda x: np.pad(x, ((0, 0), (0, w - x.shape[1])), constant_values=1.0)
Image.fromarray((np.vstack([pad(clean.input), pad(rough.input)]) * 255).astype(np.uint8)).save("lines.png")

# pretraining on clean synthetic lines with known boxes
cfg = TrainConfig(seed=0, iterations=300, log_every=50)
state = pretrain(cfg, synth=SynthSource(cfg, bank, lm))
print("loss first / last", state.losses[0]["loss"], state.losses[-1]["loss"])

val = [synth_offline_line(bank, sample_text(20, (4, 8), (9, k), lm), (9, k), sample_id=f"v{k}") for k in range(20)]
rep = evaluate(state.model, val)
print("clean val AR %.3f CR %.3f F1 %.3f" % (rep["AR"], rep["CR"], rep["seg_f1"]))

# NMS transcript against the LM-rescored beam search
boxes, plain = decode_sample(state.model, val[0])
_, with_lm = decode_sample(state.model, val[0], lm=lm, lm_weight=0.5)
print("gt     ", val[0].transcript)
print("nms    ", plain)
print("beam+lm", with_lm)

"""Toy-scale ablation: pretrain on clean synthetic lines, then compare
training variants on a distorted "real" domain whose boxes are hidden.

Variants: weak pseudo boxes with and without the context branch, and the
text-length update baseline.
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

from .pipeline import evaluate
from .synth import GlyphBank, distorted_config, sample_text, synth_offline_line
from .train import SynthSource, TrainConfig, from_pretrained, pretrain, run, toy_lm
from .types import TextLineSample


@dataclass
class AblationSettings:
    n_cls: int = 20
    glyph_seed: int = 0
    n_real: int = 400
    n_val: int = 150
    real_length: tuple = (10, 16)
    synth_length: tuple = (4, 8)
    pretrain_iterations: int = 1500
    train_iterations: int = 1500
    real_ratio: float = 0.5
    data_seed: int = 12345


VARIANTS = {
    "weak_conr": {"conr": True, "update": "weak"},
    "weak_plain": {"conr": False, "update": "weak"},
    "text_length": {"conr": True, "update": "text_length"},
}


def build_data(s: AblationSettings):
    """(bank, corpus LM, real training lines without boxes, validation lines with boxes)."""
    bank = GlyphBank.build(n_cls=s.n_cls, seed=s.glyph_seed)
    lm = toy_lm(s.n_cls)
    style = distorted_config()

    def line(k, tag):
        text = sample_text(s.n_cls, s.real_length, (s.data_seed, tag, k), lm)
        return synth_offline_line(bank, text, (s.data_seed, tag, k, 1), style, f"{'rv'[tag]}{k}")

    real = [line(k, 0) for k in range(s.n_real)]
    # the trainer only ever sees transcripts of the real split
    real = [TextLineSample(r.input, r.transcript, None, r.id) for r in real]
    val = [line(k, 1) for k in range(s.n_val)]
    return bank, lm, real, val


def _summary(rep):
    return {k: rep[k] for k in ("AR", "CR", "NED", "seg_f1", "mean_iou", "N_t", "D", "S", "I") if k in rep}


def run_seed(seed, s: AblationSettings, data=None, out_dir=None, variants=None, log=print) -> dict:
    bank, lm, real, val = data or build_data(s)
    out = Path(out_dir) if out_dir else None
    base = TrainConfig(seed=seed, n_cls=s.n_cls, glyph_seed=s.glyph_seed, text_length=s.synth_length,
                       real_ratio=s.real_ratio, log_every=10**9)
    results = {}
    t0 = time.time()
    pcfg = dataclasses.replace(base, iterations=s.pretrain_iterations, conr=False)
    pdir = out / "pretrain" if out else None
    state = pretrain(pcfg, out_dir=pdir, synth=SynthSource(pcfg, bank, lm))
    results["pretrain"] = _summary(evaluate(state.model, val))
    results["pretrain"]["loss_first"] = state.losses[0]["loss"] if state.losses else None
    results["pretrain"]["loss_last50"] = (sum(r["loss"] for r in state.losses[-50:]) /
                                          max(1, len(state.losses[-50:])))
    log(f"seed {seed} pretrain AR {results['pretrain']['AR']:.4f} ({time.time() - t0:.0f}s)")
    for name in variants or VARIANTS:
        opts = VARIANTS[name]
        cfg = dataclasses.replace(base, iterations=s.train_iterations, **opts)
        model = from_pretrained(state.model, opts["conr"])
        st = run(cfg, model, real=real, out_dir=(out / name) if out else None,
                 synth=SynthSource(cfg, bank, lm))
        results[name] = _summary(evaluate(st.model, val))
        log(f"seed {seed} {name} AR {results[name]['AR']:.4f} F1 {results[name].get('seg_f1', 0):.4f} "
            f"({time.time() - t0:.0f}s)")
    if out:
        (out / "results.json").write_text(json.dumps(results, indent=1, sort_keys=True), encoding="utf-8")
    return results

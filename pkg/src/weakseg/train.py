"""Training loops: fully supervised pretraining on synthetic lines and
mixed real/synthetic training driven by transcripts only.

Every random draw comes from a seed derived from (run seed, iteration,
slot), so a run is reproducible from its config alone.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffnet as dn
from .decode import nms_transcribe
from .lm import NGramModel
from .model import ModelConfig, Recognizer, pad_batch
from .pathsig import N_CHANNELS
from .pipeline import as_model_sample
from .synth import (GlyphBank, SynthConfig, distorted_config, sample_text, synth_offline_line,
                    synth_online_line, toy_corpus)
from .weaksup import (PseudoBoxStore, assign_regions, compute_losses, match, supervise_full,
                      text_length_update, update_pseudo_boxes)

log = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    """Loss or gradient became non-finite; the last good checkpoint was kept."""


@dataclass
class TrainConfig:
    seed: int = 0
    n_cls: int = 20
    glyph_seed: int = 0
    iterations: int = 5000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    decay_at: tuple = (0.25, 0.5, 0.75)
    decay: float = 0.1
    real_ratio: float = 0.5          # fraction of each batch drawn from the real set
    conr: bool = True
    update: str = "weak"             # "weak" (matched pseudo boxes) or "text_length"
    text_length: tuple = (4, 8)
    distorted_synth: bool = False    # draw synthetic lines from the distorted domain
    input_kind: str = "offline"      # "offline" rasters or "online" signature maps
    corpus_sentences: int = 2000
    log_every: int = 50
    checkpoint_every: int = 0        # 0: only at the end

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["decay_at"] = list(self.decay_at)
        d["text_length"] = list(self.text_length)
        return d

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in d:
                v = d[f.name]
                kw[f.name] = tuple(v) if isinstance(f.default, tuple) else v
        return cls(**kw)


def _parse_value(raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s for s in raw.replace(",", " ").split() if s]
        kind = type(default[0]) if default else float
        return tuple(kind(s) for s in items)
    return raw


def read_config(path, section) -> dict:
    """``key = value`` pairs of one section of an INI-style run config."""
    cp = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    if not cp.has_section(section):
        return {}
    return dict(cp.items(section))


def train_config_from(raw: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    kw = {}
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    for key, value in raw.items():
        if key not in names:
            raise KeyError(f"unknown training option {key!r}")
        kw[key] = _parse_value(value, getattr(base, key))
    return dataclasses.replace(base, **kw)


def lr_at(cfg: TrainConfig, it: int) -> float:
    """Step decay: multiply by ``decay`` at each fraction in ``decay_at``."""
    k = sum(it >= math.ceil(f * cfg.iterations) for f in cfg.decay_at)
    return cfg.lr * cfg.decay ** k


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# ------------------------------------------------------------------ data sources


class SynthSource:
    """On-the-fly synthetic lines with box annotations."""

    def __init__(self, cfg: TrainConfig, bank: GlyphBank | None = None, corpus_lm=None):
        self.cfg = cfg
        self.bank = bank or GlyphBank.build(n_cls=cfg.n_cls, seed=cfg.glyph_seed)
        self.style = distorted_config() if cfg.distorted_synth else SynthConfig()
        self.lm = corpus_lm

    def draw(self, it, slot):
        rng = _rng(self.cfg.seed, 1, it, slot)
        text = sample_text(self.cfg.n_cls, self.cfg.text_length, rng, self.lm)
        seed = int(rng.integers(2**62))
        if self.cfg.input_kind == "online":
            line = synth_online_line(self.bank, text, seed, self.style, sample_id=f"syn-{it}-{slot}")
            return as_model_sample(line, self.style.height)
        return synth_offline_line(self.bank, text, seed, self.style, sample_id=f"syn-{it}-{slot}")


def toy_lm(n_cls, n_sentences=2000, seed=7) -> NGramModel:
    return NGramModel.train(toy_corpus(n_cls, n_sentences, seed), n_cls=n_cls)


# ------------------------------------------------------------------ per-sample losses


def _line(outputs, i, w):
    p_loc = dn.getitem(outputs.p_loc, (i, slice(0, w)))
    p_bbox = dn.getitem(outputs.p_bbox, (i, slice(0, w)))
    p_cls = dn.getitem(outputs.p_cls, (i, slice(0, w)))
    ctx = None if outputs.p_cls_ctx is None else dn.getitem(outputs.p_cls_ctx, (i, slice(0, w)))
    return p_loc, p_bbox, p_cls, ctx


def full_loss(outputs, i, sample, region_width, height):
    w = math.ceil(outputs.widths[i] / region_width)
    p_loc, p_bbox, p_cls, _ = _line(outputs, i, w)
    assignment, entries = supervise_full(sample.boxes, sample.transcript, w, region_width)
    return compute_losses(p_loc, p_bbox, p_cls, assignment, entries, sample.transcript,
                          region_width, height)


def weak_loss(outputs, i, sample, store: PseudoBoxStore, update, region_width, height):
    """Update the pseudo boxes from this iteration's predictions, then build
    the partially supervised loss from the just-updated store."""
    grid = outputs.grid(i)
    w = grid.w_enc
    seg, rec = nms_transcribe(grid)
    gt = sample.transcript
    if update == "weak":
        update_pseudo_boxes(store, sample.id, match(rec, gt), seg, len(gt))
    elif update == "text_length":
        text_length_update(store, sample.id, seg, rec, gt)
    else:
        raise ValueError(f"unknown pseudo-box update {update!r}")
    entries = store.get(sample.id, len(gt))
    assignment = assign_regions(entries, w, region_width)
    p_loc, p_bbox, p_cls, ctx = _line(outputs, i, w)
    return compute_losses(p_loc, p_bbox, p_cls, assignment, entries, gt, region_width, height,
                          p_cls_ctx=ctx)


# ------------------------------------------------------------------ trainer


@dataclass
class TrainState:
    model: Recognizer
    store: PseudoBoxStore
    velocity: dict
    iteration: int
    losses: list            # one dict per iteration


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, stage):
    tensors = dict(state.store.to_tensors())
    tensors.update({f"velocity/{k}": v for k, v in sorted(state.velocity.items())})
    state.model.save(path, extra={"stage": stage, "iteration": state.iteration,
                                  "train": cfg.to_dict()}, extra_tensors=tensors)


def load_checkpoint(path, conr=None):
    model, header, rest = Recognizer.load(path, conr=conr)
    store = PseudoBoxStore.from_tensors(rest)
    velocity = {k[9:]: v for k, v in rest.items() if k.startswith("velocity/")}
    if not model.config.conr:
        velocity = {k: v for k, v in velocity.items() if not k.startswith("conr.")}
    return model, header, store, velocity


def run(cfg: TrainConfig, model: Recognizer, real=None, store=None, out_dir=None, stage="train",
        synth: SynthSource | None = None, on_log=None) -> TrainState:
    """Train ``model`` in place for ``cfg.iterations`` steps.

    ``real``: list of TextLineSample used through their transcripts only.
    With ``real`` empty or ``real_ratio`` 0 every slot is a box-supervised
    synthetic line (pretraining).
    """
    real = [as_model_sample(s, model.config.height) for s in real or []]
    store = store or PseudoBoxStore()
    synth = synth or SynthSource(cfg)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    n_real = int(round(cfg.real_ratio * cfg.batch_size)) if real else 0
    state = TrainState(model, store, {}, 0, [])
    rw, height = model.region_width, model.config.height
    log_fh = open(out / f"{stage}_loss.jsonl", "w", encoding="utf-8") if out else None
    try:
        for it in range(cfg.iterations):
            rng = _rng(cfg.seed, 0, it)
            batch = [real[k] for k in rng.integers(0, len(real), size=n_real)] if n_real else []
            batch += [synth.draw(it, s) for s in range(cfg.batch_size - n_real)]
            images, widths = pad_batch([s.input for s in batch], rw)
            outputs = model.forward(images, widths, mode="train")
            terms = []
            for i, sample in enumerate(batch):
                if i < n_real:
                    terms.append(weak_loss(outputs, i, sample, store, cfg.update, rw, height))
                else:
                    terms.append(full_loss(outputs, i, sample, rw, height))
            loss = terms[0].l_total
            for t in terms[1:]:
                loss = dn.add(loss, t.l_total)
            loss = loss / len(terms)
            value = loss.item()
            row = {"it": it, "lr": lr_at(cfg, it), "loss": value}
            for key in ("l_bbox", "l_cls", "l_loc", "l_conr"):
                vals = [t.values()[key] for t in terms if key in t.values()]
                if vals:
                    row[key] = float(np.mean(vals))
            if not math.isfinite(value):
                raise NumericFailure(f"non-finite loss at iteration {it}")
            model.graph.backward(loss)
            try:
                dn.sgd_step(model.graph, lr_at(cfg, it), cfg.momentum, state.velocity)
            except dn.NonFiniteGradient as e:
                raise NumericFailure(f"iteration {it}: {e}") from e
            state.iteration = it + 1
            state.losses.append(row)
            if log_fh:
                log_fh.write(json.dumps(row, sort_keys=True) + "\n")
            if on_log and (it % cfg.log_every == 0 or it == cfg.iterations - 1):
                on_log(row)
            if out and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"{stage}.ckpt", state, cfg, stage)
    except NumericFailure:
        model.graph.zero_grad()
        if out:
            # parameters still hold the last finite update
            save_checkpoint(out / f"{stage}.ckpt", state, cfg, stage)
        raise
    finally:
        if log_fh:
            log_fh.close()
    if out:
        save_checkpoint(out / f"{stage}.ckpt", state, cfg, stage)
    return state


def new_model(cfg: TrainConfig, model_cfg: ModelConfig | None = None) -> Recognizer:
    channels = N_CHANNELS if cfg.input_kind == "online" else 1
    mc = model_cfg or ModelConfig(n_cls=cfg.n_cls, in_channels=channels, seed=cfg.seed, conr=cfg.conr)
    return Recognizer(mc)


def pretrain(cfg: TrainConfig, out_dir=None, model=None, **kw) -> TrainState:
    """Box-supervised training on clean synthetic lines only."""
    model = model or new_model(dataclasses.replace(cfg, conr=False))
    return run(dataclasses.replace(cfg, real_ratio=0.0), model, real=None, out_dir=out_dir,
               stage="pretrain", **kw)


def from_pretrained(source, conr: bool) -> Recognizer:
    """Copy of a pretrained model (checkpoint path or Recognizer); the
    context branch, if requested, starts from fresh initial weights."""
    base = source if isinstance(source, Recognizer) else load_checkpoint(source, conr=False)[0]
    model = Recognizer(dataclasses.replace(base.config, conr=conr))
    state = {k: v for k, v in base.graph.state().items() if not k.startswith("conr.")}
    model.graph.load_state(state, strict=False)
    return model

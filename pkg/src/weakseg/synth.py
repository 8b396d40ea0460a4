"""Synthetic labeled text lines from a programmatic glyph alphabet.

Each class is a fixed stroke pattern; instances perturb it (slant, aspect,
point jitter). Offline lines paste rendered instances on white paper,
online lines concatenate instance trajectories. A second "distorted"
generator (elastic warp, baseline wave, shaded background, noise, heavier
strokes, tighter spacing, held-out instances) stands in for real data.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .preprocess import Trajectory, save_raster, load_raster, save_trajectory, load_trajectory
from .types import CharBox, TextLineSample

ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz"
_ANCHORS = np.array([[x, y] for y in (0.0, 0.5, 1.0) for x in (0.0, 0.5, 1.0)])
_SS = 4  # supersampling factor for anti-aliased rendering


def _candidate_strokes(rng):
    strokes = []
    for _ in range(rng.integers(2, 4)):
        k = rng.integers(2, 4)
        idx = [int(rng.integers(9))]
        while len(idx) < k:
            nxt = int(rng.integers(9))
            if nxt != idx[-1]:
                idx.append(nxt)
        strokes.append(_ANCHORS[idx].copy())
    return strokes


def _coarse_mask(strokes, size=12):
    img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(img)
    for s in strokes:
        pts = [(float(x * (size - 3) + 1), float(y * (size - 3) + 1)) for x, y in s]
        draw.line(pts, fill=255, width=2)
    return np.asarray(img) > 0


@dataclass
class GlyphBank:
    """``prototypes[c]`` is a list of (k, 2) strokes in the unit square;
    ``instances[c]`` a list of perturbed copies."""

    prototypes: list
    instances: list
    labels: str

    @property
    def n_cls(self) -> int:
        return len(self.prototypes)

    @classmethod
    def build(cls, n_cls=20, n_instances=12, seed=0, min_distance=14):
        if n_cls > len(ALPHABET):
            raise ValueError(f"at most {len(ALPHABET)} classes")
        rng = np.random.default_rng(seed)
        protos, masks = [], []
        tries = 0
        while len(protos) < n_cls:
            tries += 1
            if tries > 20000:
                raise RuntimeError("could not find enough distinct glyph patterns")
            strokes = _candidate_strokes(rng)
            pts = np.concatenate(strokes)
            if np.ptp(pts[:, 0]) < 0.5 or np.ptp(pts[:, 1]) < 0.5:
                continue
            m = _coarse_mask(strokes)
            if all(np.sum(m ^ other) >= min_distance for other in masks):
                protos.append(strokes)
                masks.append(m)
        instances = [[_perturb(p, rng) for _ in range(n_instances)] for p in protos]
        return cls(protos, instances, ALPHABET[:n_cls])


def _perturb(strokes, rng, jitter=0.05, slant=0.2):
    sh = rng.uniform(-slant, slant)
    out = []
    for s in strokes:
        p = s + rng.normal(scale=jitter, size=s.shape)
        p[:, 0] = p[:, 0] + sh * (p[:, 1] - 0.5)
        out.append(p)
    pts = np.concatenate(out)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    return [(p - lo) / span for p in out]


# ------------------------------------------------------------------ configuration


@dataclass
class SynthConfig:
    height: int = 32
    glyph_height: tuple = (19.0, 25.0)
    aspect: tuple = (0.6, 0.95)
    thickness: tuple = (1.6, 2.6)
    gap: tuple = (-0.1, 0.4)          # fraction of glyph width
    vjitter: float = 2.0
    margin: tuple = (2, 8)
    instance_pool: tuple = (0, 8)     # instance index range [lo, hi)
    ink: tuple = (0.0, 0.15)          # ink intensity
    paper: tuple = (1.0, 1.0)         # background intensity range
    warp: float = 0.0                 # elastic displacement amplitude (px)
    warp_smooth: float = 4.0
    wave: tuple = (0.0, 0.0)          # baseline wave amplitude range (px)
    shade: float = 0.0                # background gradient depth
    noise: float = 0.0
    blur: float = 0.0
    instance_jitter: float = 0.0      # extra per-draw point jitter


def distorted_config(base: SynthConfig | None = None) -> SynthConfig:
    """Held-out "real" domain: heavier, wavier, shaded, noisy."""
    base = base or SynthConfig()
    return replace(base, thickness=(2.8, 4.0), gap=(-0.15, 0.15), instance_pool=(8, 12),
                   ink=(0.05, 0.35), paper=(0.7, 0.95), warp=2.5, wave=(1.5, 3.5),
                   shade=0.25, noise=0.06, blur=0.8, instance_jitter=0.06, aspect=(0.7, 1.1))


# ------------------------------------------------------------------ rendering


def _render_mask(strokes, gw, gh, thickness):
    """Anti-aliased ink mask (gh, gw) in [0, 1] for strokes in the unit square."""
    pad = thickness / 2 + 1
    W, H = int(math.ceil(gw + 2 * pad)), int(math.ceil(gh + 2 * pad))
    img = Image.new("L", (W * _SS, H * _SS), 0)
    draw = ImageDraw.Draw(img)
    lw = max(1, int(round(thickness * _SS)))
    for s in strokes:
        pts = [((pad + x * gw) * _SS, (pad + y * gh) * _SS) for x, y in s]
        draw.line(pts, fill=255, width=lw, joint="curve")
        r = lw / 2
        for x, y in (pts[0], pts[-1]):
            draw.ellipse([x - r, y - r, x + r, y + r], fill=255)
    small = img.resize((W, H), Image.BOX)
    return np.asarray(small, dtype=np.float64) / 255.0, pad


def _smooth_field(shape, rng, amp, smooth):
    f = ndimage.gaussian_filter(rng.normal(size=shape), smooth, mode="reflect")
    f /= max(np.abs(f).max(), 1e-9)
    return amp * f


def _pick_instance(bank, cls_id, cfg, rng):
    lo, hi = cfg.instance_pool
    pool = bank.instances[cls_id]
    strokes = pool[int(rng.integers(lo, min(hi, len(pool))))]
    if cfg.instance_jitter:
        strokes = _perturb(strokes, rng, jitter=cfg.instance_jitter, slant=0.1)
    return strokes


def _layout(bank, text, cfg, rng, min_gap=None):
    """Cell geometry per character: (strokes, x, top, gw, gh)."""
    cells = []
    x = float(rng.uniform(*cfg.margin))
    for k, c in enumerate(text):
        strokes = _pick_instance(bank, c, cfg, rng)
        gh = float(rng.uniform(*cfg.glyph_height))
        gw = gh * float(rng.uniform(*cfg.aspect))
        top = (cfg.height - gh) / 2 + float(rng.uniform(-cfg.vjitter, cfg.vjitter))
        top = min(max(top, 1.0), cfg.height - gh - 1.0)
        if k:
            lo = cfg.gap[0] if min_gap is None else max(cfg.gap[0], min_gap)
            x += float(rng.uniform(lo, max(lo, cfg.gap[1]))) * cells[-1][3]
            x = max(x, cells[-1][1] + 1.0)
        cells.append((strokes, x, top, gw, gh))
        x += gw
    width = int(math.ceil(x + rng.uniform(*cfg.margin)))
    return cells, width


def synth_offline_line(bank: GlyphBank, text, seed, cfg: SynthConfig | None = None,
                       sample_id=None) -> TextLineSample:
    """Paste glyphs left to right; boxes are the exact ink extents."""
    text = [int(c) for c in text]
    if not text:
        raise ValueError("empty text")
    for c in text:
        if not 0 <= c < bank.n_cls:
            raise ValueError(f"class id {c} not in glyph bank")
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    cells, width = _layout(bank, text, cfg, rng)
    H = cfg.height
    masks = []
    for strokes, x, top, gw, gh in cells:
        m, pad = _render_mask(strokes, gw, gh, float(rng.uniform(*cfg.thickness)))
        full = np.zeros((H, width))
        ox, oy = int(round(x - pad)), int(round(top - pad))
        ys, xs = slice(max(oy, 0), min(oy + m.shape[0], H)), slice(max(ox, 0), min(ox + m.shape[1], width))
        full[ys, xs] = m[ys.start - oy:ys.stop - oy, xs.start - ox:xs.stop - ox]
        masks.append(full)
    masks = np.stack(masks)

    if cfg.warp or cfg.wave[1]:
        rows, cols = np.mgrid[0:H, 0:width].astype(np.float64)
        dy = np.zeros((H, width))
        dx = np.zeros((H, width))
        if cfg.warp:
            dx += _smooth_field((H, width), rng, cfg.warp, cfg.warp_smooth)
            dy += _smooth_field((H, width), rng, cfg.warp, cfg.warp_smooth)
        if cfg.wave[1]:
            amp = rng.uniform(*cfg.wave)
            period = rng.uniform(50, 110)
            dy += amp * np.sin(2 * np.pi * cols / period + rng.uniform(0, 2 * np.pi))
        coords = [rows - dy, cols - dx]
        masks = np.stack([ndimage.map_coordinates(m, coords, order=1, mode="constant") for m in masks])

    boxes = []
    for c, m in zip(text, masks):
        ys, xs = np.nonzero(m > 0.05)
        if len(xs) == 0:
            raise RuntimeError("glyph vanished during rendering")
        boxes.append(CharBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1), c, 1.0))

    ink_level = float(rng.uniform(*cfg.ink))
    paper = float(rng.uniform(*cfg.paper))
    bg = np.full((H, width), paper)
    if cfg.shade:
        ramp = np.linspace(0, 1, width)[None, :] if rng.random() < 0.5 else np.linspace(1, 0, width)[None, :]
        bg = bg - cfg.shade * ramp * rng.uniform(0.3, 1.0)
    coverage = np.clip(masks.max(axis=0), 0, 1)
    img = bg * (1 - coverage) + ink_level * coverage
    if cfg.blur:
        img = ndimage.gaussian_filter(img, cfg.blur)
    if cfg.noise:
        img = img + rng.normal(scale=cfg.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    # boxes sorted by center; overlap may swap near-identical centres
    order = sorted(range(len(boxes)), key=lambda k: (boxes[k].cx, k))
    if order != list(range(len(boxes))):
        raise RuntimeError("layout produced out-of-order characters")
    cell_meta = [(x, x + gw) for _, x, _, gw, _ in cells]
    return TextLineSample(img, text, boxes, sample_id or f"off-{seed}",
                          meta={"cells": cell_meta})


def synth_online_line(bank: GlyphBank, text, seed, cfg: SynthConfig | None = None,
                      sample_id=None) -> TextLineSample:
    """Concatenate instance trajectories; boxes are per-character extents."""
    text = [int(c) for c in text]
    if not text:
        raise ValueError("empty text")
    for c in text:
        if not 0 <= c < bank.n_cls:
            raise ValueError(f"class id {c} not in glyph bank")
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    # pen trajectories are concatenated without overlap
    cells, _ = _layout(bank, text, cfg, rng, min_gap=0.05)
    strokes, boxes = [], []
    for c, (inst, x, top, gw, gh) in zip(text, cells):
        placed = [np.column_stack([x + s[:, 0] * gw, top + s[:, 1] * gh]) for s in inst]
        pts = np.concatenate(placed)
        boxes.append(CharBox(float(pts[:, 0].min()), float(pts[:, 1].min()),
                             float(pts[:, 0].max()), float(pts[:, 1].max()), c, 1.0))
        strokes.extend(placed)
    return TextLineSample(Trajectory(strokes), text, boxes, sample_id or f"on-{seed}",
                          meta={"points_per_char": [sum(len(s) for s in inst) for inst, *_ in cells],
                                "strokes_per_char": [len(inst) for inst, *_ in cells]})


# ------------------------------------------------------------------ text sampling


def sample_text(n_cls, length_range, seed_or_rng, corpus=None) -> list[int]:
    """Uniform ids, or a draw from a trained n-gram model when ``corpus`` is given."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    if n_cls < 1:
        raise ValueError("empty vocabulary")
    lo, hi = length_range
    length = int(rng.integers(lo, hi + 1))
    if corpus is None:
        return [int(c) for c in rng.integers(0, n_cls, size=length)]
    return corpus.sample(length, rng)


def toy_corpus(n_cls, n_sentences, seed, n_words=40, word_len=(2, 4), sent_len=(6, 12)):
    """Sentences made by concatenating words from a fixed random lexicon,
    giving the character stream strong local structure."""
    lex_rng = np.random.default_rng(10_000 + n_cls)
    lexicon = [list(lex_rng.integers(0, n_cls, size=int(lex_rng.integers(word_len[0], word_len[1] + 1))))
               for _ in range(n_words)]
    # Zipf-like word frequencies
    freq = 1.0 / np.arange(1, n_words + 1)
    freq /= freq.sum()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_sentences):
        target = int(rng.integers(sent_len[0], sent_len[1] + 1))
        s: list[int] = []
        while len(s) < target:
            s.extend(int(c) for c in lexicon[int(rng.choice(n_words, p=freq))])
        out.append(s[:target])
    return out


# ------------------------------------------------------------------ dataset files


def write_dataset(samples, out_dir, with_boxes=True) -> Path:
    """Write inputs plus ``manifest.jsonl`` ({id, input_path, transcript, boxes?})."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        if isinstance(s.input, Trajectory):
            name = f"{s.id}.json"
            save_trajectory(out / name, s.input)
        else:
            name = f"{s.id}.png"
            save_raster(out / name, s.input)
        rec = {"id": s.id, "input_path": name, "transcript": list(map(int, s.transcript))}
        if with_boxes and s.boxes is not None:
            rec["boxes"] = [b.to_list() for b in s.boxes]
        lines.append(json.dumps(rec))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_dataset(manifest) -> list[TextLineSample]:
    manifest = Path(manifest)
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    samples = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        path = manifest.parent / rec["input_path"]
        if not path.exists():
            raise FileNotFoundError(f"{manifest}: missing input file {path}")
        data = load_trajectory(path) if path.suffix == ".json" else load_raster(path)
        boxes = [CharBox.from_list(b) for b in rec["boxes"]] if rec.get("boxes") else None
        samples.append(TextLineSample(data, rec["transcript"], boxes, rec["id"]))
    return samples

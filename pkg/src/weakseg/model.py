"""Fully convolutional recognizer with location / box / class heads.

Architecture (height-32 input, region width 8)::

    conv3x3(cin->c1) relu, pool2              32 -> 16
    conv3x3(c1->c2) relu, pool2               16 -> 8
    resblock(c2->c3), pool2                    8 -> 4
    resblock(c3->c4)                           4
    conv(4x3, no vertical pad)(c4->c5) relu    4 -> 1      f_enc
    three branches conv(1x3)(c5->c5) relu   -> f_loc, f_bbox, f_cls
    1x1 heads: sigmoid(1), linear(4), softmax(n_cls)

A resblock is conv3x3-relu-conv3x3 plus a 1x1 projection skip, then relu.
Output projections start at zero so the first steps see neutral heads
(p_loc 0.5, uniform classes, boxes at the region default); random output
weights let the early box-regression gradient swamp the encoder.
The contextual-regularization branch (training only) stacks two
bidirectional LSTM layers on f_cls and a softmax classifier.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffnet as dn
from .diffnet import Graph, Tensor

# ------------------------------------------------------------------ box encoding


def encode_box(region, box, region_width, height) -> np.ndarray:
    """Pixel box (x0, y0, x1, y1) -> raw (dx, dy, log w, log h) relative to ``region``."""
    x0, y0, x1, y1 = (float(v) for v in box[:4])
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    return np.array([
        (cx - (region + 0.5) * region_width) / region_width,
        (cy - 0.5 * height) / height,
        math.log((x1 - x0) / region_width),
        math.log((y1 - y0) / height),
    ])


def decode_box(region, raw, region_width, height, width=None) -> tuple[float, float, float, float]:
    """Inverse of :func:`encode_box`, clamped to the [0, width] x [0, height] frame."""
    cx = (region + 0.5) * region_width + raw[0] * region_width
    cy = 0.5 * height + raw[1] * height
    w = math.exp(raw[2]) * region_width
    h = math.exp(raw[3]) * height
    right = float("inf") if width is None else width
    x0 = min(max(cx - 0.5 * w, 0.0), right)
    x1 = min(max(cx + 0.5 * w, 0.0), right)
    y0 = min(max(cy - 0.5 * h, 0.0), height)
    y1 = min(max(cy + 0.5 * h, 0.0), height)
    return (x0, y0, x1, y1)


def decode_boxes(raw, region_width, height, width=None) -> np.ndarray:
    """Vectorized :func:`decode_box` over all regions of a (w_enc, 4) array."""
    raw = np.asarray(raw)
    n = np.arange(raw.shape[0])
    cx = (n + 0.5 + raw[:, 0]) * region_width
    cy = (0.5 + raw[:, 1]) * height
    w = np.exp(np.clip(raw[:, 2], -20, 20)) * region_width
    h = np.exp(np.clip(raw[:, 3], -20, 20)) * height
    right = np.inf if width is None else width
    return np.stack([
        np.clip(cx - 0.5 * w, 0, right), np.clip(cy - 0.5 * h, 0, height),
        np.clip(cx + 0.5 * w, 0, right), np.clip(cy + 0.5 * h, 0, height),
    ], axis=1)


def region_of(x, region_width, w_enc) -> int:
    return int(min(max(math.floor(x / region_width), 0), w_enc - 1))


@dataclass
class PredictionGrid:
    p_loc: np.ndarray        # (w_enc,)
    p_bbox: np.ndarray       # (w_enc, 4) raw box encoding
    p_cls: np.ndarray        # (w_enc, n_cls)
    region_width: int
    height: int
    width: int               # input width in pixels
    p_cls_ctx: np.ndarray | None = None

    @property
    def w_enc(self) -> int:
        return len(self.p_loc)

    def validate(self):
        if self.w_enc != math.ceil(self.width / self.region_width):
            raise ValueError(f"w_enc {self.w_enc} != ceil({self.width}/{self.region_width})")
        if np.any(self.p_loc < 0) or np.any(self.p_loc > 1):
            raise ValueError("p_loc outside [0, 1]")
        if np.max(np.abs(self.p_cls.sum(axis=1) - 1)) > 1e-6:
            raise ValueError("p_cls rows do not sum to 1")

    def boxes(self) -> np.ndarray:
        return decode_boxes(self.p_bbox, self.region_width, self.height, self.width)


# ------------------------------------------------------------------ network


@dataclass
class ModelConfig:
    n_cls: int = 20
    in_channels: int = 1
    height: int = 32
    channels: tuple = (12, 16, 32, 48, 64)
    conr_hidden: int = 24
    conr: bool = True
    seed: int = 0
    region_width: int = field(default=8, init=False)

    def to_dict(self):
        return {"n_cls": self.n_cls, "in_channels": self.in_channels, "height": self.height,
                "channels": list(self.channels), "conr_hidden": self.conr_hidden,
                "conr": self.conr, "seed": self.seed, "region_width": self.region_width}

    @classmethod
    def from_dict(cls, d):
        cfg = cls(n_cls=d["n_cls"], in_channels=d["in_channels"], height=d["height"],
                  channels=tuple(d["channels"]), conr_hidden=d["conr_hidden"],
                  conr=d["conr"], seed=d["seed"])
        return cfg

    def arch_hash(self) -> str:
        d = self.to_dict()
        del d["seed"], d["conr"]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Outputs:
    """Batched head outputs as graph tensors: (N, w), (N, w, 4), (N, w, C)."""
    p_loc: Tensor
    p_bbox: Tensor
    p_cls: Tensor
    p_cls_ctx: Tensor | None
    widths: list[int]
    region_width: int
    height: int

    def grid(self, i) -> PredictionGrid:
        w = math.ceil(self.widths[i] / self.region_width)
        ctx = None if self.p_cls_ctx is None else self.p_cls_ctx.data[i, :w].copy()
        return PredictionGrid(self.p_loc.data[i, :w].copy(), self.p_bbox.data[i, :w].copy(),
                              self.p_cls.data[i, :w].copy(), self.region_width, self.height,
                              self.widths[i], ctx)


class Recognizer:
    def __init__(self, config: ModelConfig | None = None):
        self.config = cfg = config or ModelConfig()
        if cfg.height != 32:
            raise ValueError("the encoder collapses exactly 32 rows; height must be 32")
        self.graph = g = Graph(seed=cfg.seed)
        c1, c2, c3, c4, c5 = cfg.channels
        g.init_param("stem.k", (3, 3, cfg.in_channels, c1))
        g.init_param("stem.b", (c1,), zero=True)
        g.init_param("conv2.k", (3, 3, c1, c2))
        g.init_param("conv2.b", (c2,), zero=True)
        for name, cin, cout in (("block1", c2, c3), ("block2", c3, c4)):
            g.init_param(f"{name}.k1", (3, 3, cin, cout))
            g.init_param(f"{name}.b1", (cout,), zero=True)
            g.init_param(f"{name}.k2", (3, 3, cout, cout))
            g.init_param(f"{name}.b2", (cout,), zero=True)
            g.init_param(f"{name}.proj", (1, 1, cin, cout))
        g.init_param("collapse.k", (4, 3, c4, c5))
        g.init_param("collapse.b", (c5,), zero=True)
        for head in ("loc", "bbox", "cls"):
            g.init_param(f"{head}.k", (1, 3, c5, c5))
            g.init_param(f"{head}.b", (c5,), zero=True)
        g.init_param("loc.out", (1, 1, c5, 1), zero=True)
        g.add("loc.out_b", np.zeros(1))
        g.init_param("bbox.out", (1, 1, c5, 4), zero=True)
        g.add("bbox.out_b", np.zeros(4))
        g.init_param("cls.out", (1, 1, c5, cfg.n_cls), zero=True)
        g.init_param("cls.out_b", (cfg.n_cls,), zero=True)
        if cfg.conr:
            h = cfg.conr_hidden
            for layer, cin in (("conr.l1", c5), ("conr.l2", 2 * h)):
                for d in ("f", "b"):
                    g.init_param(f"{layer}.{d}.wx", (cin, 4 * h))
                    g.init_param(f"{layer}.{d}.wh", (h, 4 * h), fan_in=h)
                    g.init_param(f"{layer}.{d}.b", (4 * h,), zero=True)
            g.init_param("conr.out", (2 * h, cfg.n_cls), zero=True)
            g.init_param("conr.out_b", (cfg.n_cls,), zero=True)

    @property
    def params(self):
        return self.graph.params

    @property
    def region_width(self):
        return self.config.region_width

    def w_enc(self, width) -> int:
        return math.ceil(width / self.region_width)

    def _block(self, x, name):
        p = self.params
        y = dn.relu(dn.conv2d(x, p[f"{name}.k1"], p[f"{name}.b1"], pad=(1, 1)))
        y = dn.conv2d(y, p[f"{name}.k2"], p[f"{name}.b2"], pad=(1, 1))
        return dn.relu(dn.add(y, dn.conv2d(x, p[f"{name}.proj"])))

    def _conr(self, f_cls, lengths):
        p = self.params
        n, _, w, c = f_cls.shape
        seq = dn.reshape(f_cls, (n, w, c))
        for layer in ("conr.l1", "conr.l2"):
            fwd = [p[f"{layer}.f.{k}"] for k in ("wx", "wh", "b")]
            bwd = [p[f"{layer}.b.{k}"] for k in ("wx", "wh", "b")]
            seq = dn.birecur(seq, fwd, bwd, lengths=lengths)
        return dn.softmax(dn.affine(seq, p["conr.out"], p["conr.out_b"]))

    def forward(self, images, widths=None, mode="infer") -> Outputs:
        """``images``: (N, 32, W, C) ink-positive input (0 = background),
        W a multiple of the region width. ``widths`` are the valid widths."""
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[..., None]
        n, h, w, c = x.shape
        if h != self.config.height:
            raise ValueError(f"input height {h} != configured height {self.config.height}")
        if c != self.config.in_channels:
            raise ValueError(f"input channels {c} != configured {self.config.in_channels}")
        if w < self.region_width or w % self.region_width:
            raise ValueError(f"input width {w} must be a positive multiple of {self.region_width}")
        widths = [w] * n if widths is None else list(widths)
        p = self.params
        y = dn.relu(dn.conv2d(x, p["stem.k"], p["stem.b"], pad=(1, 1)))
        y = dn.maxpool2d(y)
        y = dn.maxpool2d(dn.relu(dn.conv2d(y, p["conv2.k"], p["conv2.b"], pad=(1, 1))))
        y = dn.maxpool2d(self._block(y, "block1"))
        y = self._block(y, "block2")
        f_enc = dn.relu(dn.conv2d(y, p["collapse.k"], p["collapse.b"], pad=(0, 1)))
        feats = {hd: dn.relu(dn.conv2d(f_enc, p[f"{hd}.k"], p[f"{hd}.b"], pad=(0, 1)))
                 for hd in ("loc", "bbox", "cls")}
        wenc = w // self.region_width
        p_loc = dn.sigmoid(dn.reshape(dn.conv2d(feats["loc"], p["loc.out"], p["loc.out_b"]), (n, wenc)))
        p_bbox = dn.reshape(dn.conv2d(feats["bbox"], p["bbox.out"], p["bbox.out_b"]), (n, wenc, 4))
        logits = dn.conv2d(feats["cls"], p["cls.out"], p["cls.out_b"])
        p_cls = dn.softmax(dn.reshape(logits, (n, wenc, self.config.n_cls)))
        ctx = None
        if mode == "train" and self.config.conr:
            ctx = self._conr(feats["cls"], [self.w_enc(wi) for wi in widths])
        return Outputs(p_loc, p_bbox, p_cls, ctx, widths, self.region_width, h)

    def predict(self, image) -> PredictionGrid:
        """Single raster / feature map of any width; pads to the region grid."""
        batch, widths = pad_batch([image], self.region_width)
        return self.forward(batch, widths, mode="infer").grid(0)

    # -------------------------------------------------------------- checkpoints

    def header(self) -> dict:
        return {"kind": "recognizer", "model": self.config.to_dict(),
                "arch_hash": self.config.arch_hash()}

    def save(self, path, extra: dict | None = None, extra_tensors=None):
        header = self.header()
        header.update(extra or {})
        tensors = {f"param/{k}": v for k, v in self.graph.state().items()}
        tensors.update(extra_tensors or {})
        dn.save_container(path, tensors, header)

    @classmethod
    def load(cls, path, conr=None) -> tuple["Recognizer", dict, dict]:
        """Returns (model, header, non-parameter tensors). ``conr`` overrides
        whether the training-only branch is built; its weights are skipped if not."""
        header, tensors = dn.load_container(path)
        if header.get("kind") != "recognizer":
            raise dn.CheckpointError(f"{path}: not a recognizer checkpoint")
        cfg = ModelConfig.from_dict(header["model"])
        if cfg.arch_hash() != header.get("arch_hash"):
            raise dn.CheckpointError(f"{path}: architecture hash mismatch")
        if conr is not None:
            cfg.conr = conr
        model = cls(cfg)
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
        if not cfg.conr:
            params = {k: v for k, v in params.items() if not k.startswith("conr.")}
        model.graph.load_state(params, strict=True)
        rest = {k: v for k, v in tensors.items() if not k.startswith("param/")}
        return model, header, rest


def pad_batch(images, region_width=8):
    """Stack rasters (H, W) or maps (H, W, C) into an ink-positive batch padded
    on the right with background to a common multiple of ``region_width``.

    Rasters are white-is-1 grayscale and get inverted; maps are used as-is.
    """
    arrs = []
    for im in images:
        a = np.asarray(im, dtype=np.float64)
        arrs.append((1.0 - a)[..., None] if a.ndim == 2 else a)
    widths = [a.shape[1] for a in arrs]
    w = max(math.ceil(max(widths) / region_width) * region_width, region_width)
    out = np.zeros((len(arrs), arrs[0].shape[0], w, arrs[0].shape[2]))
    for i, a in enumerate(arrs):
        out[i, :, :a.shape[1]] = a
    return out, widths

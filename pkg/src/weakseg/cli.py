"""Command line entry point: ``python -m weakseg <command>``.

Commands: synth, pretrain, train, eval, decode, viz. Every option may also
be given in an INI-style config file (``--config``), in a section named
after the command; command-line flags win. Exit codes: 0 success, 1 usage
error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import diffnet as dn
from .decode import decoded_record, read_decoded
from .lm import NGramModel
from .metrics import format_table, write_report
from .pipeline import decode_input, prepare, report_from_decoded
from .preprocess import Trajectory
from .synth import (GlyphBank, SynthConfig, distorted_config, sample_text, synth_offline_line,
                    synth_online_line, toy_corpus, write_dataset, read_dataset)
from .train import (NumericFailure, SynthSource, TrainConfig, from_pretrained, load_checkpoint, pretrain,
                    run, train_config_from)

log = logging.getLogger("weakseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _cmd_options(parser):
    return {a.dest for a in parser._actions if a.dest not in ("help", "command", "config")}


def _merge(args, parser, section):
    """Fill options not given on the command line from the config file.
    Returns the leftover config keys (training hyper-parameters)."""
    extra = {}
    if not args.config:
        return extra
    cp = configparser.ConfigParser()
    path = Path(args.config)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    if not cp.has_section(section):
        return extra
    known = _cmd_options(parser)
    for key, value in cp.items(section):
        dest = key.replace("-", "_")
        if dest in known:
            if getattr(args, dest) is None:
                setattr(args, dest, value)
        else:
            extra[key] = value
    return extra


def _int_pair(text):
    lo, hi = (int(v) for v in str(text).replace(",", " ").split())
    return lo, hi


def _bool(text):
    if isinstance(text, bool):
        return text
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def _write_config(path, section, values: dict):
    cp = configparser.ConfigParser()
    cp[section] = {k: " ".join(map(str, v)) if isinstance(v, (list, tuple)) else str(v)
                   for k, v in sorted(values.items())}
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


# ------------------------------------------------------------------ commands


def cmd_synth(args, extra):
    if extra:
        raise UsageError(f"unknown synth options: {sorted(extra)}")
    if not args.out:
        raise UsageError("synth needs --out")
    n_cls = int(args.n_cls or 20)
    seed = int(args.seed or 0)
    n = int(args.n or 100)
    length = _int_pair(args.length or "4 8")
    style = {"clean": SynthConfig(), "distorted": distorted_config()}.get(args.style or "clean")
    if style is None:
        raise UsageError(f"unknown style {args.style!r}")
    kind = args.kind or "offline"
    if kind not in ("offline", "online"):
        raise UsageError(f"unknown kind {kind!r}")
    bank = GlyphBank.build(n_cls=n_cls, seed=int(args.glyph_seed or 0))
    lm = NGramModel.train(toy_corpus(n_cls, 2000, 7), n_cls=n_cls) if _bool(args.corpus or True) else None
    make = synth_online_line if kind == "online" else synth_offline_line
    samples = []
    for k in range(n):
        text = sample_text(n_cls, length, (seed, 0, k), lm)
        samples.append(make(bank, text, (seed, 1, k), style, sample_id=f"{kind[:2]}{seed}-{k:05d}"))
    manifest = write_dataset(samples, args.out, with_boxes=not _bool(args.no_boxes or False))
    if lm is not None:
        lm.save(Path(args.out) / "lm.bin")
    print(f"wrote {n} samples to {manifest}")
    return EXIT_OK


def _train_config(args, extra):
    try:
        cfg = train_config_from(extra)
    except (KeyError, ValueError) as e:
        raise UsageError(f"bad training option: {e}") from e
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(args.seed))
    if args.iterations is not None:
        cfg = dataclasses.replace(cfg, iterations=int(args.iterations))
    return cfg


def _progress(row):
    log.info("it %d lr %.2g loss %.4f", row["it"], row["lr"], row["loss"])


def cmd_pretrain(args, extra):
    if not args.out:
        raise UsageError("pretrain needs --out")
    cfg = _train_config(args, extra)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out / "pretrain.ini", "pretrain", cfg.to_dict())
    bank = GlyphBank.build(n_cls=cfg.n_cls, seed=cfg.glyph_seed)
    lm = NGramModel.train(toy_corpus(cfg.n_cls, cfg.corpus_sentences, 7), n_cls=cfg.n_cls)
    pcfg = dataclasses.replace(cfg, conr=False)
    pretrain(pcfg, out_dir=out, synth=SynthSource(pcfg, bank, lm), on_log=_progress)
    print(f"wrote {out / 'pretrain.ckpt'}")
    return EXIT_OK


def cmd_train(args, extra):
    for flag in ("out", "pretrained", "real"):
        if not getattr(args, flag):
            raise UsageError(f"train needs --{flag}")
    cfg = _train_config(args, extra)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out / "train.ini", "train", cfg.to_dict())
    if not Path(args.pretrained).exists():
        raise FileNotFoundError(f"pretrained checkpoint not found: {args.pretrained}")
    model = from_pretrained(args.pretrained, cfg.conr)
    real = read_dataset(args.real)
    bank = GlyphBank.build(n_cls=cfg.n_cls, seed=cfg.glyph_seed)
    lm = NGramModel.train(toy_corpus(cfg.n_cls, cfg.corpus_sentences, 7), n_cls=cfg.n_cls)
    run(cfg, model, real=real, out_dir=out, stage="train", synth=SynthSource(cfg, bank, lm), on_log=_progress)
    print(f"wrote {out / 'train.ckpt'}")
    return EXIT_OK


def _load_for_inference(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if not args.manifest:
        raise UsageError("--manifest is required")
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint, conr=False)[0]
    samples = read_dataset(args.manifest)
    lm = None
    if args.lm:
        if not Path(args.lm).exists():
            raise FileNotFoundError(f"language model not found: {args.lm}")
        lm = NGramModel.load(args.lm)
    beam = int(args.beam_width or 16)
    weight = float(args.lm_weight if args.lm_weight is not None else 0.3)
    return model, samples, lm, beam, weight


def _decode_all(model, samples, lm, beam, weight):
    out = []
    for s in samples:
        seg, rec = decode_input(model, prepare(s, model.config.height)[0], lm, beam, weight)
        out.append({"id": s.id, "transcript": rec, "boxes": seg})
    return out


def cmd_eval(args, extra):
    if extra:
        raise UsageError(f"unknown eval options: {sorted(extra)}")
    model, samples, lm, beam, weight = _load_for_inference(args)
    rep = report_from_decoded(_decode_all(model, samples, lm, beam, weight), samples, model.config.height)
    if args.report:
        write_report(args.report, rep)
    print(format_table(rep))
    return EXIT_OK


def cmd_decode(args, extra):
    if extra:
        raise UsageError(f"unknown decode options: {sorted(extra)}")
    if not args.out:
        raise UsageError("decode needs --out")
    model, samples, lm, beam, weight = _load_for_inference(args)
    rows = _decode_all(model, samples, lm, beam, weight)
    with open(args.out, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(decoded_record(r["id"], r["transcript"], r["boxes"]) + "\n")
    if lm is not None and args.diff_log:
        # paired run without the LM; only rows whose ranking changed are logged
        plain = _decode_all(model, samples, None, beam, weight)
        with open(args.diff_log, "w", encoding="utf-8") as fh:
            for a, b in zip(plain, rows):
                if a["transcript"] != b["transcript"]:
                    fh.write(json.dumps({"id": a["id"], "without_lm": a["transcript"],
                                         "with_lm": b["transcript"]}) + "\n")
    print(f"decoded {len(rows)} samples to {args.out}")
    return EXIT_OK


def render_overlay(sample, boxes, labels="", height=32) -> Image.Image:
    """Input drawn as grayscale with decoded boxes and class labels.
    With no boxes the input image is returned unchanged."""
    x = sample.input
    if isinstance(x, Trajectory) or np.asarray(x).ndim == 3:
        # trajectories are shown as their rendered ink
        m = prepare(sample, height)[0]
        gray = np.where(np.abs(m).sum(axis=2) > 0, 0.0, 1.0)
    else:
        gray = np.asarray(x, dtype=np.float64)
    img = Image.fromarray(np.clip(np.round(gray * 255), 0, 255).astype(np.uint8), mode="L")
    if not boxes:
        return img
    scale = 4
    img = img.convert("RGB").resize((img.width * scale, img.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for b in boxes:
        draw.rectangle([b.x_min * scale, b.y_min * scale, b.x_max * scale - 1, b.y_max * scale - 1],
                       outline=(220, 30, 30))
        name = labels[b.class_id] if 0 <= b.class_id < len(labels) else str(b.class_id)
        draw.text((b.x_min * scale + 2, b.y_min * scale + 1), name, fill=(30, 30, 220))
    return img


def cmd_viz(args, extra):
    if extra:
        raise UsageError(f"unknown viz options: {sorted(extra)}")
    for flag in ("manifest", "decoded", "out"):
        if not getattr(args, flag):
            raise UsageError(f"viz needs --{flag}")
    if not Path(args.decoded).exists():
        raise FileNotFoundError(f"decoded file not found: {args.decoded}")
    samples = {s.id: s for s in read_dataset(args.manifest)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = args.labels or ""
    for row in read_decoded(args.decoded):
        if row["id"] not in samples:
            raise KeyError(f"decoded id {row['id']!r} not in manifest")
        render_overlay(samples[row["id"]], row["boxes"], labels).save(out / f"{row['id']}.png")
    print(f"wrote overlays to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser():
    p = _Parser(prog="weakseg", description="Segmentation-based text line recognizer trained from transcripts.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI-style config file; section named after the command")
        sp.add_argument("--seed")
        return sp

    s = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    for flag in ("out", "n", "n-cls", "length", "style", "kind", "glyph-seed", "corpus"):
        s.add_argument(f"--{flag}")
    s.add_argument("--no-boxes", action="store_const", const=True, default=None)

    for name in ("pretrain", "train"):
        t = common(sub.add_parser(name, help=f"{name} a recognizer"))
        t.add_argument("--out", help="run directory")
        t.add_argument("--iterations")
        if name == "train":
            t.add_argument("--pretrained", help="pretrain checkpoint")
            t.add_argument("--real", help="manifest of transcript-only training lines")

    for name in ("eval", "decode"):
        e = common(sub.add_parser(name, help=f"{name} a dataset"))
        for flag in ("checkpoint", "manifest", "lm", "beam-width", "lm-weight"):
            e.add_argument(f"--{flag}")
        if name == "eval":
            e.add_argument("--report", help="JSON report path")
        else:
            e.add_argument("--out", help="decoded JSON-lines path")
            e.add_argument("--diff-log", help="with --lm: log rows that differ from LM-free decoding")

    v = common(sub.add_parser("viz", help="draw decoded boxes onto inputs"))
    for flag in ("manifest", "decoded", "out", "labels"):
        v.add_argument(f"--{flag}")
    return p


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval, "decode": cmd_decode, "viz": cmd_viz}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        extra = _merge(args, sub, args.command)
        return COMMANDS[args.command](args, extra)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, dn.CheckpointError, KeyError, ValueError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

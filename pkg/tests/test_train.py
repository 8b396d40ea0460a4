import dataclasses

import numpy as np
import pytest

from weakseg import diffnet as dn
from weakseg.model import Recognizer
from weakseg.synth import GlyphBank, distorted_config, synth_offline_line
from weakseg.train import (NumericFailure, SynthSource, TrainConfig, from_pretrained, load_checkpoint, lr_at,
                           new_model, pretrain, read_config, run, train_config_from)
from weakseg.types import TextLineSample

TINY = TrainConfig(seed=0, iterations=3, batch_size=2)


@pytest.fixture(scope="module")
def bank():
    return GlyphBank.build(n_cls=20, seed=0)


@pytest.fixture(scope="module")
def real(bank):
    lines = [synth_offline_line(bank, [1, 2, 3, 4], seed=k, cfg=distorted_config(), sample_id=f"r{k}")
             for k in range(3)]
    return [TextLineSample(s.input, s.transcript, None, s.id) for s in lines]


def test_step_decay_schedule():
    cfg = TrainConfig(iterations=100, lr=0.01)
    assert [lr_at(cfg, i) for i in (0, 24, 25, 49, 50, 75, 99)] == pytest.approx(
        [0.01, 0.01, 1e-3, 1e-3, 1e-4, 1e-5, 1e-5])


def test_config_parsing(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[train]\nlr = 0.5\nconr = off\ndecay_at = 0.5, 0.9\nupdate = text_length\n", encoding="utf-8")
    cfg = train_config_from(read_config(p, "train"))
    assert cfg.lr == 0.5 and cfg.conr is False and cfg.decay_at == (0.5, 0.9)
    assert cfg.update == "text_length"
    assert read_config(p, "missing") == {}
    with pytest.raises(KeyError):
        train_config_from({"nope": "1"})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_iterations_keeps_initialisation(tmp_path, bank):
    cfg = dataclasses.replace(TINY, iterations=0)
    init = new_model(dataclasses.replace(cfg, conr=False)).graph.state()
    pretrain(cfg, out_dir=tmp_path, synth=SynthSource(cfg, bank))
    model, header, _, _ = load_checkpoint(tmp_path / "pretrain.ckpt")
    assert header["iteration"] == 0
    for k, v in init.items():
        assert np.array_equal(model.params[k].data, v)


def test_same_seed_same_run(tmp_path, bank):
    a = pretrain(TINY, out_dir=tmp_path / "a", synth=SynthSource(TINY, bank))
    b = pretrain(TINY, out_dir=tmp_path / "b", synth=SynthSource(TINY, bank))
    assert a.losses == b.losses
    assert (tmp_path / "a/pretrain.ckpt").read_bytes() == (tmp_path / "b/pretrain.ckpt").read_bytes()
    assert (tmp_path / "a/pretrain_loss.jsonl").read_bytes() == (tmp_path / "b/pretrain_loss.jsonl").read_bytes()
    c = pretrain(dataclasses.replace(TINY, seed=1), synth=SynthSource(dataclasses.replace(TINY, seed=1), bank))
    assert c.losses != a.losses


def test_real_ratio_zero_is_pretraining(bank, real):
    cfg = dataclasses.replace(TINY, real_ratio=0.0, conr=False)
    a = pretrain(cfg, synth=SynthSource(cfg, bank))
    b = run(cfg, new_model(cfg), real=real, synth=SynthSource(cfg, bank), stage="pretrain")
    assert a.losses == b.losses
    assert not b.store.entries


def test_weak_training_fills_store_and_checkpoints_it(tmp_path, bank, real):
    cfg = dataclasses.replace(TINY, real_ratio=0.5, iterations=2)
    model = new_model(cfg)
    # make predictions confident so some pseudo boxes appear immediately
    model.params["loc.out_b"].data[:] = 5.0
    st = run(cfg, model, real=real, out_dir=tmp_path, synth=SynthSource(cfg, bank))
    assert "l_conr" in st.losses[0]
    _, header, store, velocity = load_checkpoint(tmp_path / "train.ckpt")
    assert header["stage"] == "train" and header["iteration"] == 2
    assert set(store.entries) == set(st.store.entries)
    for sid, ent in st.store.entries.items():
        for a, b in zip(ent, store.entries[sid]):
            assert (a is None) == (b is None)
            if a is not None:
                assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    assert set(velocity) == set(st.velocity)


def test_text_length_variant_runs(bank, real):
    cfg = dataclasses.replace(TINY, real_ratio=0.5, update="text_length", conr=False)
    st = run(cfg, new_model(cfg), real=real, synth=SynthSource(cfg, bank))
    assert len(st.losses) == 3 and "l_conr" not in st.losses[0]


class PoisonedSource(SynthSource):
    def draw(self, it, slot):
        s = super().draw(it, slot)
        if it == 2:
            img = s.input.copy()
            img[0, 0] = np.nan
            return TextLineSample(img, s.transcript, s.boxes, s.id)
        return s


def test_non_finite_loss_aborts_with_last_good_checkpoint(tmp_path, bank):
    cfg = dataclasses.replace(TINY, iterations=5, decay_at=())
    with pytest.raises(NumericFailure):
        pretrain(cfg, out_dir=tmp_path, synth=PoisonedSource(cfg, bank))
    model, header, _, _ = load_checkpoint(tmp_path / "pretrain.ckpt")
    assert header["iteration"] == 2
    assert all(np.all(np.isfinite(p.data)) for p in model.params.values())
    good = pretrain(dataclasses.replace(cfg, iterations=2), synth=SynthSource(cfg, bank))
    for k, p in good.model.params.items():
        assert np.array_equal(model.params[k].data, p.data)


def test_from_pretrained_adds_fresh_context_branch(tmp_path, bank):
    st = pretrain(TINY, out_dir=tmp_path, synth=SynthSource(TINY, bank))
    m = from_pretrained(tmp_path / "pretrain.ckpt", conr=True)
    assert m.config.conr and "conr.l1.f.wx" in m.params
    for k, p in st.model.params.items():
        assert np.array_equal(m.params[k].data, p.data)
    m2 = from_pretrained(st.model, conr=False)
    assert not any(k.startswith("conr.") for k in m2.params)


def test_online_pretraining_step(bank):
    cfg = dataclasses.replace(TINY, iterations=1, input_kind="online")
    st = pretrain(cfg, synth=SynthSource(cfg, bank))
    assert st.model.config.in_channels == 7 and np.isfinite(st.losses[0]["loss"])


def test_checkpoint_is_recognizer_file(tmp_path, bank):
    pretrain(TINY, out_dir=tmp_path, synth=SynthSource(TINY, bank))
    model, header, rest = Recognizer.load(tmp_path / "pretrain.ckpt")
    assert header["train"]["iterations"] == 3
    assert isinstance(model, Recognizer)
    with pytest.raises(dn.CheckpointError):
        (tmp_path / "x.ckpt").write_bytes(b"")
        Recognizer.load(tmp_path / "x.ckpt")

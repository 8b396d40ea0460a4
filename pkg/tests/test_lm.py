import math

import numpy as np
import pytest

from weakseg.lm import NGramModel, read_corpus

K = 0.01


def test_hand_counted_table():
    # 10 symbols over vocabulary {0, 1, 2}
    corpus = [[0, 1, 2, 0, 1], [1, 1, 2, 0, 0]]
    m = NGramModel.train(corpus, n_cls=3, k=K)
    # trigram context (0, 1) is followed by 2 once (first sentence)
    assert math.exp(m.logp(2, [0, 1])) == pytest.approx((1 + K) / (1 + 3 * K))
    assert math.exp(m.logp(0, [0, 1])) == pytest.approx(K / (1 + 3 * K))
    # context (BOS, BOS): first symbols 0 and 1
    assert math.exp(m.logp(0, [])) == pytest.approx((1 + K) / (2 + 3 * K))
    # (2, 2) never seen as trigram context; bigram context 2 -> {0: 2}
    assert math.exp(m.logp(0, [2, 2])) == pytest.approx((2 + K) / (2 + 3 * K))
    # bigram "1" -> 2 twice, 1 once (from "1 1" and "1 2" twice)
    assert math.exp(m.logp(2, [2, 1])) == pytest.approx((2 + K) / (3 + 3 * K))


def test_repeated_symbol_dominates():
    m = NGramModel.train([[0, 0, 0]], n_cls=2)
    assert math.exp(m.logp(0, [0, 0])) > 0.98


def test_distributions_normalize_and_are_positive():
    rng = np.random.default_rng(1)
    corpus = [list(rng.integers(0, 6, size=rng.integers(1, 10))) for _ in range(30)]
    m = NGramModel.train(corpus, n_cls=7)
    for u in range(-1, 7):
        for v in range(-1, 7):
            ctx = [c for c in (u, v) if c >= 0]
            ps = [math.exp(m.logp(w, ctx)) for w in range(7)]
            assert sum(ps) == pytest.approx(1.0, abs=1e-9)
            assert all(0 < p <= 1 for p in ps)


def test_unknown_label_gets_unigram_floor():
    m = NGramModel.train([[0, 1]], n_cls=2)
    assert m.logp(5, [0]) == pytest.approx(math.log(K / (2 + 2 * K)))


def test_rejects_empty():
    with pytest.raises(ValueError):
        NGramModel.train([])
    with pytest.raises(ValueError):
        NGramModel.train([[]])


def test_save_load_roundtrip(tmp_path):
    m = NGramModel.train([[0, 1, 2, 2], [2, 1]], n_cls=4)
    m.save(tmp_path / "lm.bin")
    m2 = NGramModel.load(tmp_path / "lm.bin")
    for ctx in ([], [0], [1, 2], [3, 3]):
        assert np.array_equal(m.distribution(ctx), m2.distribution(ctx))
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        NGramModel.load(tmp_path / "bad.bin")


def test_sampling_follows_observed_transitions():
    m = NGramModel.train([[0, 1, 2, 3]] * 3, n_cls=4)
    assert m.sample(4, np.random.default_rng(0)) == [0, 1, 2, 3]


def test_read_corpus(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("ABA\n\nCz\n", encoding="utf-8")
    assert read_corpus(p, "ABC") == [[0, 1, 0], [2]]

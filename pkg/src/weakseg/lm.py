"""Character tri-gram language model with add-k smoothing and backoff.

P(w | u, v) uses the highest-order context seen in training:

    trigram  (c(u,v,w) + k) / (c(u,v) + k|V|)   if c(u,v) > 0
    bigram   (c(v,w)   + k) / (c(v)   + k|V|)   elif c(v) > 0
    unigram  (c(w)     + k) / (N      + k|V|)

Each branch is a proper distribution over the vocabulary, so every
context normalizes exactly. Sequences are left-padded with a begin
symbol; there is no end symbol.
"""
from __future__ import annotations

import struct
from collections import Counter, defaultdict

import numpy as np

BOS = -1
LM_MAGIC = b"NGLMCNT1"
LM_VERSION = 1


class NGramModel:
    order = 3

    def __init__(self, n_cls: int, k: float = 0.01):
        if n_cls < 1:
            raise ValueError("empty vocabulary")
        self.n_cls = n_cls
        self.k = k
        self.tri: dict[tuple[int, int], Counter] = defaultdict(Counter)
        self.bi: dict[int, Counter] = defaultdict(Counter)
        self.uni: Counter = Counter()
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    @classmethod
    def train(cls, corpus, n_cls=None, k=0.01) -> "NGramModel":
        corpus = [list(s) for s in corpus]
        if not corpus:
            raise ValueError("empty corpus")
        if n_cls is None:
            seen = {c for s in corpus for c in s}
            if not seen:
                raise ValueError("empty vocabulary")
            n_cls = max(seen) + 1
        model = cls(n_cls, k)
        for seq in corpus:
            padded = [BOS, BOS] + seq
            for t, w in enumerate(seq):
                if not 0 <= w < n_cls:
                    raise ValueError(f"label {w} outside vocabulary of size {n_cls}")
                u, v = padded[t], padded[t + 1]
                model.tri[(u, v)][w] += 1
                model.bi[v][w] += 1
                model.uni[w] += 1
        return model

    def _context(self, context):
        ctx = [BOS, BOS] + list(context)
        return ctx[-2], ctx[-1]

    def distribution(self, context=()) -> np.ndarray:
        """Smoothed P(. | context) over the whole vocabulary."""
        key = self._context(context)
        dist = self._cache.get(key)
        if dist is not None:
            return dist
        u, v = key
        counts = self.tri.get((u, v))
        if not counts:
            counts = self.bi.get(v)
        if not counts:
            counts = self.uni
        vec = np.zeros(self.n_cls)
        for w, c in counts.items():
            vec[w] = c
        dist = (vec + self.k) / (vec.sum() + self.k * self.n_cls)
        self._cache[key] = dist
        return dist

    def logp(self, label, context=()) -> float:
        if not 0 <= label < self.n_cls:
            # unknown label: unigram floor
            total = sum(self.uni.values())
            return float(np.log(self.k / (total + self.k * self.n_cls)))
        return float(np.log(self.distribution(context)[label]))

    def raw_counts(self, context=()) -> Counter:
        """Unsmoothed next-label counts at the highest seen context order."""
        u, v = self._context(context)
        return self.tri.get((u, v)) or self.bi.get(v) or self.uni

    def sample(self, length: int, rng: np.random.Generator, smoothed=False) -> list[int]:
        out: list[int] = []
        for _ in range(length):
            if smoothed:
                p = self.distribution(out[-2:])
            else:
                counts = self.raw_counts(out[-2:])
                p = np.zeros(self.n_cls)
                for w, c in counts.items():
                    p[w] = c
                p /= p.sum()
            out.append(int(rng.choice(self.n_cls, p=p)))
        return out

    # -------------------------------------------------------------- serialization

    def save(self, path):
        parts = [LM_MAGIC, struct.pack("<IIdI", LM_VERSION, self.order, self.k, self.n_cls)]
        tables = [
            [((u, v, w), c) for (u, v), ctr in self.tri.items() for w, c in ctr.items()],
            [((v, w), c) for v, ctr in self.bi.items() for w, c in ctr.items()],
            [((w,), c) for w, c in self.uni.items()],
        ]
        for table in tables:
            table.sort()
            parts.append(struct.pack("<I", len(table)))
            for key, c in table:
                # begin symbol stored as id n_cls
                ids = [self.n_cls if x == BOS else x for x in key]
                parts.append(struct.pack(f"<{len(ids)}IQ", *ids, c))
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))

    @classmethod
    def load(cls, path) -> "NGramModel":
        with open(path, "rb") as fh:
            buf = fh.read()
        if buf[:8] != LM_MAGIC:
            raise ValueError(f"{path}: not a language-model file")
        version, order, k, n_cls = struct.unpack_from("<IIdI", buf, 8)
        if version != LM_VERSION or order != 3:
            raise ValueError(f"{path}: unsupported LM version {version} / order {order}")
        model = cls(n_cls, k)
        pos = 8 + struct.calcsize("<IIdI")
        for arity, target in ((3, "tri"), (2, "bi"), (1, "uni")):
            (count,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            fmt = f"<{arity}IQ"
            size = struct.calcsize(fmt)
            for _ in range(count):
                *ids, c = struct.unpack_from(fmt, buf, pos)
                pos += size
                ids = [BOS if x == n_cls else x for x in ids]
                if arity == 3:
                    model.tri[(ids[0], ids[1])][ids[2]] = c
                elif arity == 2:
                    model.bi[ids[0]][ids[1]] = c
                else:
                    model.uni[ids[0]] = c
        return model


def read_corpus(path, alphabet: str) -> list[list[int]]:
    """Plain text corpus, one sequence per line, symbols drawn from ``alphabet``."""
    index = {ch: i for i, ch in enumerate(alphabet)}
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append([index[ch] for ch in line if ch in index])
    return [s for s in out if s]

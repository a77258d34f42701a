"""Memory-attended text encoding.

A frozen per-word memory of visual context (the salience-weighted average of
each word's most salient region feature across the images whose captions use
it) is projected and concatenated with a learned word embedding, and the
sequence is run through a bidirectional LSTM.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import LSTM, Linear, Module, param
from .tensor import Tensor

logger = logging.getLogger(__name__)

MEMORY_MAGIC = b"CPGM"
MEMORY_VERSION = 1


@dataclass
class MemoryBank:
    vectors: np.ndarray  # (vocab_size, memory_dim)
    counts: np.ndarray  # (vocab_size,) relevant-image count N_r
    top_k: int

    @property
    def vocab_size(self) -> int:
        return self.vectors.shape[0]

    @property
    def memory_dim(self) -> int:
        return self.vectors.shape[1]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(MEMORY_MAGIC)
            fh.write(struct.pack("<IIII", MEMORY_VERSION, self.vocab_size, self.memory_dim, self.top_k))
            vec = self.vectors.astype("<f4")
            for r in range(self.vocab_size):
                fh.write(struct.pack("<I", int(self.counts[r])))
                fh.write(vec[r].tobytes())

    @classmethod
    def load(cls, path) -> "MemoryBank":
        raw = Path(path).read_bytes()
        if raw[:4] != MEMORY_MAGIC:
            raise ValueError(f"{path}: bad magic {raw[:4]!r}")
        version, vocab, dim, top_k = struct.unpack_from("<IIII", raw, 4)
        if version != MEMORY_VERSION:
            raise ValueError(f"{path}: unsupported memory version {version}")
        expected = 20 + vocab * (4 + 4 * dim)
        if len(raw) != expected:
            raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
        vectors = np.empty((vocab, dim), dtype=np.float32)
        counts = np.empty(vocab, dtype=np.int64)
        off = 20
        for r in range(vocab):
            counts[r] = struct.unpack_from("<I", raw, off)[0]
            vectors[r] = np.frombuffer(raw, dtype="<f4", count=dim, offset=off + 4)
            off += 4 + 4 * dim
        return cls(vectors, counts, top_k)


def build_memory(
    dataset: Sequence,
    object_feature_fn: Callable,
    salience_oracle: Callable,
    top_k: int,
    vocab_size: int,
    memory_dim: int,
) -> MemoryBank:
    """Weighted average of each word's most salient region feature.

    For every sample whose caption contains word r: q = argmax of the salience
    over its regions (first index wins), weight a_q, feature v_q. Only the
    ``top_k`` samples with the largest a_q are kept (lower sample index wins
    ties). ``object_feature_fn(sample, region_index)`` returns a feature of
    length ``memory_dim``; ``salience_oracle(word, sample)`` returns weights
    over the sample's regions (or an empty array if it has none).
    """
    if len(dataset) == 0:
        raise ValueError("build_memory needs a nonempty dataset")
    relevant = [[] for _ in range(vocab_size)]
    for n, sample in enumerate(dataset):
        for r in sorted(set(sample.tokens)):
            relevant[r].append(n)

    vectors = np.zeros((vocab_size, memory_dim))
    counts = np.zeros(vocab_size, dtype=np.int64)
    for r in range(vocab_size):
        picks = []
        for n in relevant[r]:
            a = np.asarray(salience_oracle(r, dataset[n]), dtype=np.float64)
            if a.size == 0:
                continue
            q = int(np.argmax(a))
            picks.append((float(a[q]), n, q))
        counts[r] = len(picks)
        if not picks:
            continue
        picks.sort(key=lambda p: (-p[0], p[1]))
        kept = picks[:top_k]
        total = sum(w for w, _, _ in kept)
        if total <= 0:
            logger.warning("word %d: zero total salience over %d images; treated as unobserved", r, len(kept))
            continue
        acc = np.zeros(memory_dim)
        for w, n, q in kept:
            acc += w * np.asarray(object_feature_fn(dataset[n], q), dtype=np.float64)
        vectors[r] = acc / total
    return MemoryBank(vectors, counts, top_k)


class TextEncoder(Module):
    """Embedding ``E`` (embed_dim x vocab), memory projection ``p`` and a Bi-LSTM
    whose per-direction width is d/2, so each word vector has length d."""

    def __init__(self, vocab_size: int, embed_dim: int, memory_dim: int, d: int, rng: np.random.Generator,
                 slope: float = 0.2):
        if d % 2:
            raise ValueError("word dimension d must be even")
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.d = d
        self.slope = slope
        self.E = param(rng.standard_normal((embed_dim, vocab_size)))
        self.p1 = Linear(memory_dim, embed_dim, rng)
        self.p2 = Linear(embed_dim, embed_dim, rng)
        self.fwd = LSTM(2 * embed_dim, d // 2, rng)
        self.bwd = LSTM(2 * embed_dim, d // 2, rng)
        self.memory: Optional[Tensor] = None

    def set_memory(self, bank: MemoryBank) -> None:
        if bank.vocab_size != self.vocab_size:
            raise ValueError(f"memory covers {bank.vocab_size} words, encoder has {self.vocab_size}")
        self.memory = Tensor(bank.vectors)

    def project_memory(self, m: Tensor) -> Tensor:
        return self.p2(T.leaky_relu(self.p1(m), self.slope))

    def fuse(self, ids) -> Tensor:
        """f_i = [e_i; p(m_i)] for each id; returns (n, 2 * embed_dim)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"word id outside vocabulary of {self.vocab_size}")
        if self.memory is None:
            raise RuntimeError("memory bank not attached; call set_memory first")
        e = T.take(self.E, ids, axis=1).T
        pm = T.take(self.project_memory(self.memory), ids, axis=0)
        return T.concat([e, pm], axis=1)

    def __call__(self, captions: Sequence[Sequence[int]]) -> tuple:
        """Encode a batch of captions.

        Returns ``(W, s, mask)``: W is (B, d, T_max) with zero columns past each
        caption's end, s is (B, d) and equals W[b, :, T_b - 1], mask is a bool
        (B, T_max) array of real word positions.
        """
        if any(len(c) == 0 for c in captions):
            raise ValueError("cannot encode an empty caption")
        B = len(captions)
        lengths = np.array([len(c) for c in captions])
        t_max = int(lengths.max())
        ids = np.zeros((B, t_max), dtype=np.int64)
        mask = np.zeros((B, t_max), dtype=bool)
        for b, c in enumerate(captions):
            ids[b, : len(c)] = c
            mask[b, : len(c)] = True
        feats = self.fuse(ids.reshape(-1)).reshape(B, t_max, 2 * self.embed_dim)
        xs = [feats[:, t, :] for t in range(t_max)]
        mask_f = mask.astype(T.get_dtype())
        hf = self.fwd.run(xs, mask_f)
        hb = self.bwd.run(xs, mask_f, reverse=True)
        cols = T.stack([T.concat([hf[t], hb[t]], axis=1) for t in range(t_max)], axis=2)  # (B, d, T)
        if not mask.all():
            cols = cols * Tensor(np.broadcast_to(mask_f[:, None, :], cols.shape))
        s = cols[np.arange(B), :, lengths - 1]
        return cols, s, mask

    def encode_text(self, tokens: Sequence[int]) -> tuple:
        """Single caption: (W of shape (d, T), s of shape (d,))."""
        if len(tokens) == 0:
            raise ValueError("cannot encode an empty caption")
        W, s, _ = self([list(tokens)])
        return W[0], s[0]

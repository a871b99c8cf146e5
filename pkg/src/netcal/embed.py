"""Token embeddings: skip-gram with negative sampling, plus the fixed-random ablation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .lang import Vocabulary
from .persist import CorruptFileError

logger = logging.getLogger(__name__)


@dataclass
class SkipGramConfig:
    dim: int = 64
    window_radius: int = 5
    negatives_per_positive: int = 5
    epochs: int = 5
    learning_rate: float = 0.025
    batch_pairs: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("dim", "window_radius", "negatives_per_positive", "epochs", "batch_pairs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


@dataclass
class EmbeddingTable:
    """One row per vocabulary id plus a final UNK row.

    ``source`` is ``"learned"`` or ``"fixed-random:<seed>"``. ``context`` holds
    the skip-gram output vectors when the table was trained; it is not saved.
    """

    vectors: np.ndarray
    tokens: List[str]
    source: str = "learned"
    context: Optional[np.ndarray] = field(default=None, repr=False)
    loss_history: List[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.tokens) + 1:
            raise ValueError("need one vector per token plus UNK")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def lookup(self, token_id: int) -> np.ndarray:
        if not 0 <= token_id < len(self):
            raise IndexError(f"token id {token_id} outside table of {len(self)}")
        return self.vectors[token_id]

    def window_vectors(self, ids) -> np.ndarray:
        """Gather rows for an id array of any shape; result has a trailing ``dim`` axis."""
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self)):
            raise IndexError("token id outside embedding table")
        return self.vectors[ids]

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"dim={self.dim} count={len(self)} source={self.source}\n")
            for tok, vec in zip(self.tokens + ["<UNK>"], self.vectors):
                if " " in tok:
                    raise ValueError(f"token {tok!r} contains a space")
                fh.write(tok + " " + " ".join(repr(float(x)) for x in vec) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EmbeddingTable":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        try:
            header = dict(kv.split("=", 1) for kv in lines[0].split())
            dim, count = int(header["dim"]), int(header["count"])
        except (ValueError, KeyError, IndexError):
            raise CorruptFileError(f"{path}: bad embedding header {lines[0]!r}") from None
        rows = [ln for ln in lines[1:] if ln]
        if len(rows) != count:
            raise CorruptFileError(f"{path}: expected {count} vectors, found {len(rows)}")
        tokens, vecs = [], np.empty((count, dim))
        for i, row in enumerate(rows):
            parts = row.split(" ")
            if len(parts) != dim + 1:
                raise CorruptFileError(f"{path}: row {i + 1} has {len(parts) - 1} values, expected {dim}")
            tokens.append(parts[0])
            vecs[i] = [float(x) for x in parts[1:]]
        return cls(vectors=vecs, tokens=tokens[:-1], source=header.get("source", "learned"))


def fixed_random_embeddings(vocab: Vocabulary, dim: int = 64, seed: int = 0) -> EmbeddingTable:
    """i.i.d. N(0, 1/dim) rows (scale 1/sqrt(dim)), reproducible from ``seed``."""
    if dim < 1:
        raise ValueError("dim must be positive")
    rng = np.random.default_rng(seed)
    vecs = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(len(vocab) + 1, dim))
    return EmbeddingTable(vectors=vecs, tokens=list(vocab.tokens), source=f"fixed-random:{seed}")


def _as_sentences(stream) -> List[np.ndarray]:
    stream = list(stream)
    if stream and np.ndim(stream[0]) == 0:
        return [np.asarray(stream, dtype=np.int64)]
    return [np.asarray(s, dtype=np.int64) for s in stream]


def skipgram_pairs(sentences: Sequence[np.ndarray], radius: int) -> np.ndarray:
    """All (center, context) pairs within ``radius`` inside each sentence, shape (P, 2)."""
    chunks = []
    for s in sentences:
        n = len(s)
        for off in range(1, radius + 1):
            if off >= n:
                break
            chunks.append(np.stack([s[:-off], s[off:]], axis=1))
            chunks.append(np.stack([s[off:], s[:-off]], axis=1))
    if not chunks:
        return np.empty((0, 2), dtype=np.int64)
    return np.concatenate(chunks)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


def sgns_objective(w_in, w_out, pairs, negatives) -> float:
    """Mean negative-sampling loss over ``pairs`` with a fixed ``negatives`` matrix."""
    v = w_in[pairs[:, 0]]
    pos = np.einsum("pd,pd->p", v, w_out[pairs[:, 1]])
    neg = np.einsum("pd,pkd->pk", v, w_out[negatives])
    loss = -_log_sigmoid(pos) - _log_sigmoid(-neg).sum(axis=1)
    return float(loss.mean())


def noise_distribution(sentences, vocab_size: int) -> np.ndarray:
    counts = np.zeros(vocab_size)
    for s in sentences:
        counts += np.bincount(s, minlength=vocab_size)[:vocab_size]
    weights = counts ** 0.75
    return weights / weights.sum()


def train_embeddings(stream, vocab: Vocabulary, cfg: SkipGramConfig = SkipGramConfig()) -> EmbeddingTable:
    """Fit skip-gram vectors with minibatch SGD over shuffled (center, context) pairs.

    ``stream`` is one id sequence or a list of sentences. Each row's update
    is its gradient averaged over its occurrences in the minibatch. The UNK
    row keeps its initial value. The per-epoch objective (evaluated on all
    pairs with a fixed negative draw) is recorded in ``loss_history``,
    starting with the value before training.
    """
    if len(vocab) == 0:
        raise ValueError("empty vocabulary")
    sentences = _as_sentences(stream)
    total = sum(len(s) for s in sentences)
    if total < 2 * cfg.window_radius + 1:
        raise ValueError(f"stream of {total} tokens is shorter than {2 * cfg.window_radius + 1}")
    n = len(vocab)
    for s in sentences:
        if len(s) and (s.min() < 0 or s.max() >= n):
            raise ValueError("stream contains ids outside the vocabulary")

    rng = np.random.default_rng(cfg.seed)
    w_in = (rng.random((n + 1, cfg.dim)) - 0.5) / cfg.dim
    w_out = np.zeros((n + 1, cfg.dim))
    pairs = skipgram_pairs(sentences, cfg.window_radius)
    noise = noise_distribution(sentences, n)
    k = cfg.negatives_per_positive
    eval_neg = rng.choice(n, size=(len(pairs), k), p=noise)

    history = [sgns_objective(w_in, w_out, pairs, eval_neg)]
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        negs = rng.choice(n, size=(len(pairs), k), p=noise)
        for start in range(0, len(pairs), cfg.batch_pairs):
            idx = order[start:start + cfg.batch_pairs]
            c, o, ng = pairs[idx, 0], pairs[idx, 1], negs[idx]
            v = w_in[c]
            u_pos = w_out[o]
            u_neg = w_out[ng]
            g_pos = _sigmoid(np.einsum("bd,bd->b", v, u_pos)) - 1.0
            g_neg = _sigmoid(np.einsum("bd,bkd->bk", v, u_neg))
            grad_v = g_pos[:, None] * u_pos + np.einsum("bk,bkd->bd", g_neg, u_neg)
            g_in = np.zeros_like(w_in)
            g_out = np.zeros_like(w_out)
            np.add.at(g_in, c, grad_v)
            np.add.at(g_out, o, g_pos[:, None] * v)
            np.add.at(g_out, ng, g_neg[:, :, None] * v[:, None, :])
            # per-row mean over the batch: frequent tokens would otherwise take
            # one summed step per occurrence and diverge on small vocabularies
            n_in = np.bincount(c, minlength=n + 1)
            n_out = np.bincount(o, minlength=n + 1) + np.bincount(ng.ravel(), minlength=n + 1)
            w_in -= cfg.learning_rate * g_in / np.maximum(n_in, 1)[:, None]
            w_out -= cfg.learning_rate * g_out / np.maximum(n_out, 1)[:, None]
        history.append(sgns_objective(w_in, w_out, pairs, eval_neg))
        logger.debug("skip-gram epoch %d objective %.6f", epoch + 1, history[-1])
    if not np.all(np.isfinite(w_in)):
        raise FloatingPointError("non-finite embedding after training")
    return EmbeddingTable(vectors=w_in, tokens=list(vocab.tokens), context=w_out, loss_history=history)


def pair_score(table: EmbeddingTable, center: int, context: int) -> float:
    """Probability the trained model assigns to ``context`` appearing near ``center``."""
    if table.context is None:
        raise ValueError("table has no context vectors")
    return float(_sigmoid(table.vectors[center] @ table.context[context]))

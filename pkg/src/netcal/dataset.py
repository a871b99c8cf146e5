"""Fixed-length windows over token-id streams and contrastive triplets with mutated negatives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .embed import EmbeddingTable

SYSCALL_WINDOW = 500
PACKET_WINDOW = 100
HARD_CANDIDATES = 50


class NegativeStrategy(str, Enum):
    RANDOM = "random"
    HARD = "hard"


@dataclass(frozen=True, eq=False)
class Window:
    token_ids: np.ndarray
    stream_offset: int

    def __len__(self) -> int:
        return len(self.token_ids)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Window)
            and self.stream_offset == other.stream_offset
            and np.array_equal(self.token_ids, other.token_ids)
        )


@dataclass(frozen=True, eq=False)
class Triplet:
    anchor: Window
    positive: Window
    negative: Window
    mutated_positions: frozenset = frozenset()

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Triplet)
            and self.anchor == other.anchor
            and self.positive == other.positive
            and self.negative == other.negative
            and self.mutated_positions == other.mutated_positions
        )


@dataclass
class AugmentationConfig:
    mutation_rate: float = 0.1
    strategy: NegativeStrategy = NegativeStrategy.RANDOM
    candidates: int = HARD_CANDIDATES
    seed: int = 0

    def __post_init__(self):
        self.strategy = NegativeStrategy(self.strategy)
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation_rate must lie in [0, 1]")
        if self.candidates < 1:
            raise ValueError("candidates must be at least 1")


def mutation_count(rate: float, length: int) -> int:
    # half-up rounding; Python's round() would send 0.5*odd to even
    return int(math.floor(rate * length + 0.5))


def segment(stream: Sequence[int], window_length: int) -> List[Window]:
    """Non-overlapping consecutive windows; the trailing remainder is dropped."""
    if window_length < 1:
        raise ValueError("window_length must be positive")
    arr = np.asarray(stream, dtype=np.int64)
    count = len(arr) // window_length
    return [Window(arr[i * window_length:(i + 1) * window_length].copy(), i * window_length) for i in range(count)]


def mutate_window(window: Window, rate: float, vocab_size: int, rng) -> tuple:
    """Replace exactly ``round(rate * len)`` distinct positions with different vocabulary ids.

    ``rng`` is a seed or a ``numpy.random.Generator``. Returns the mutated
    window (same offset) and the sorted mutated positions.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    rng = np.random.default_rng(rng)
    length = len(window)
    count = mutation_count(rate, length)
    if count == 0:
        return Window(window.token_ids.copy(), window.stream_offset), ()
    if vocab_size < 2:
        raise ValueError("mutation needs at least two vocabulary tokens")
    positions = np.sort(rng.choice(length, size=count, replace=False))
    ids = window.token_ids.copy()
    orig = ids[positions]
    in_vocab = orig < vocab_size
    # draw from the vocab minus the original token: shift draws at/after it up by one
    draw = rng.integers(0, vocab_size - in_vocab.astype(np.int64))
    draw = np.where(in_vocab & (draw >= orig), draw + 1, draw)
    ids[positions] = draw
    return Window(ids, window.stream_offset), tuple(int(p) for p in positions)


def mean_embedding(table: EmbeddingTable) -> Callable[[Window], np.ndarray]:
    return lambda w: table.window_vectors(w.token_ids).mean(axis=0)


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return 1.0 - float(a @ b) / (na * nb)


def make_triplets(
    windows: Sequence[Window],
    cfg: AugmentationConfig,
    vocab_size: int,
    embed_fn: Optional[Callable[[Window], np.ndarray]] = None,
) -> List[Triplet]:
    """Anchor i, positive i+1, negative drawn from windows after i+1 then mutated.

    Random draws for anchor i come from a generator seeded by ``(seed, i)``,
    so the list does not depend on evaluation order. Hard mining scores
    candidates by cosine distance under ``embed_fn`` and needs it supplied.
    """
    if len(windows) < 3:
        raise ValueError(f"need at least 3 windows, got {len(windows)}")
    if cfg.strategy is NegativeStrategy.HARD and embed_fn is None:
        raise ValueError("hard-negative mining needs an embedding function")
    cache = {}

    def embedded(j):
        if j not in cache:
            cache[j] = np.asarray(embed_fn(windows[j]), dtype=float)
        return cache[j]

    out = []
    for i in range(len(windows) - 2):
        rng = np.random.default_rng([cfg.seed, i])
        future = np.arange(i + 2, len(windows))
        if cfg.strategy is NegativeStrategy.RANDOM:
            j = int(rng.choice(future))
        else:
            pool = rng.choice(future, size=min(cfg.candidates, len(future)), replace=False)
            anchor_vec = embedded(i)
            dists = [_cosine_distance(anchor_vec, embedded(int(c))) for c in pool]
            j = int(pool[int(np.argmax(dists))])
        negative, positions = mutate_window(windows[j], cfg.mutation_rate, vocab_size, rng)
        out.append(Triplet(windows[i], windows[i + 1], negative, frozenset(positions)))
    return out


def triplet_arrays(triplets: Sequence[Triplet]) -> np.ndarray:
    """Stack token ids to shape (N, 3, L) in anchor/positive/negative order."""
    return np.stack([np.stack([t.anchor.token_ids, t.positive.token_ids, t.negative.token_ids]) for t in triplets])


def write_triplets(triplets: Sequence[Triplet], path: Union[str, Path]) -> None:
    """Debug dump: offsets plus each mutated position with its replacement id."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in triplets:
            muts = ",".join(f"{p}:{int(t.negative.token_ids[p])}" for p in sorted(t.mutated_positions))
            fh.write(
                f"anchor={t.anchor.stream_offset}\tpositive={t.positive.stream_offset}\t"
                f"negative={t.negative.stream_offset}\tlength={len(t.anchor)}\tmutated={muts}\n"
            )


def read_triplets(path: Union[str, Path], stream: Sequence[int]) -> List[Triplet]:
    """Rebuild triplets from a dump and the token stream it was made from."""
    arr = np.asarray(stream, dtype=np.int64)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                f = dict(part.split("=", 1) for part in line.split("\t"))
                length = int(f["length"])
                offs = [int(f[k]) for k in ("anchor", "positive", "negative")]
                muts = [tuple(map(int, m.split(":"))) for m in f["mutated"].split(",") if m]
            except (KeyError, ValueError):
                raise ValueError(f"{path}:{lineno}: malformed triplet line") from None
            if max(offs) + length > len(arr):
                raise ValueError(f"{path}:{lineno}: offsets exceed the token stream")
            wins = [Window(arr[o:o + length].copy(), o) for o in offs]
            for pos, tok in muts:
                wins[2].token_ids[pos] = tok
            out.append(Triplet(wins[0], wins[1], wins[2], frozenset(p for p, _ in muts)))
    return out

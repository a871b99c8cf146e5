import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netcal.dataset import (
    AugmentationConfig, NegativeStrategy, Window, make_triplets, mutate_window, mutation_count,
    read_triplets, segment, triplet_arrays, write_triplets,
)


def test_segment_drops_remainder():
    wins = segment(range(10), 3)
    assert [w.stream_offset for w in wins] == [0, 3, 6]
    assert wins[-1].token_ids.tolist() == [6, 7, 8]
    assert segment(range(2), 3) == []


@pytest.mark.parametrize("rate,length,count", [(0.1, 100, 10), (0.2, 500, 100), (0.05, 10, 1),
                                                (0.25, 2, 1), (0.0, 100, 0), (1.0, 7, 7)])
def test_mutation_count(rate, length, count):
    assert mutation_count(rate, length) == count


@settings(max_examples=150, deadline=None)
@given(
    rate=st.sampled_from([0.0, 0.1, 0.2, 0.5, 1.0]),
    length=st.integers(1, 200),
    vocab=st.integers(2, 30),
    seed=st.integers(0, 2**32 - 1),
)
def test_mutation_hamming_exact(rate, length, vocab, seed):
    rng = np.random.default_rng(seed)
    w = Window(rng.integers(0, vocab, size=length), 0)
    out, positions = mutate_window(w, rate, vocab, rng)
    diff = np.flatnonzero(out.token_ids != w.token_ids)
    assert len(diff) == mutation_count(rate, length)
    assert tuple(diff) == positions
    assert out.token_ids.max() < vocab


def test_mutating_unk_position_draws_real_token():
    w = Window(np.full(10, 5), 0)  # 5 is UNK for a vocabulary of 5
    out, _ = mutate_window(w, 1.0, 5, 0)
    assert out.token_ids.max() < 5


def _windows(n, length=5, vocab=7, seed=0):
    return segment(np.random.default_rng(seed).integers(0, vocab, size=n * length), length)


def test_triplet_ordering():
    wins = _windows(6)
    trips = make_triplets(wins, AugmentationConfig(0.2, seed=1), 7)
    assert len(trips) == 4
    for i, t in enumerate(trips):
        assert t.anchor == wins[i]
        assert t.positive == wins[i + 1]
        assert t.negative.stream_offset >= wins[i + 2].stream_offset
        assert len(t.mutated_positions) == 1


def test_three_windows_give_one_triplet():
    wins = _windows(3)
    trips = make_triplets(wins, AugmentationConfig(0.0), 7)
    assert len(trips) == 1 and trips[0].negative == wins[2]
    with pytest.raises(ValueError):
        make_triplets(wins[:2], AugmentationConfig(0.0), 7)


def test_triplets_deterministic():
    wins = _windows(20)
    cfg = AugmentationConfig(0.4, seed=5)
    assert make_triplets(wins, cfg, 7) == make_triplets(wins, cfg, 7)


def test_hard_mining_picks_farthest_candidate():
    wins = _windows(12)
    far = wins[7].stream_offset

    def embed(w):
        return np.array([1.0, 0.0]) if w.stream_offset != far else np.array([-1.0, 0.0])

    cfg = AugmentationConfig(0.0, NegativeStrategy.HARD, candidates=50)
    trips = make_triplets(wins, cfg, 7, embed)
    for i, t in enumerate(trips):
        if i + 2 <= 7:
            assert t.negative.stream_offset == far
    with pytest.raises(ValueError):
        make_triplets(wins, cfg, 7)


def test_dump_round_trip(tmp_path):
    stream = np.random.default_rng(2).integers(0, 9, size=60)
    trips = make_triplets(segment(stream, 6), AugmentationConfig(0.5, seed=3), 9)
    write_triplets(trips, tmp_path / "t.tsv")
    back = read_triplets(tmp_path / "t.tsv", stream)
    assert back == trips
    assert triplet_arrays(back).shape == (len(trips), 3, 6)

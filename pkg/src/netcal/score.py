"""Isolation-forest scoring of window embeddings, fit on benign data only."""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .persist import CorruptFileError, VersionError

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649015329
SCORER_VERSION = 1
PAPER_CONTAMINATIONS = (0.005, 0.015, 0.025)


def average_path_length(n) -> np.ndarray:
    """Expected unsuccessful-search depth in a random BST of ``n`` keys.

    ``c(n) = 2 H(n-1) - 2 (n-1) / n`` with ``H(i) ~ ln i + gamma``, and the
    conventions ``c(0) = c(1) = 0``, ``c(2) = 1``.
    """
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    two = n == 2
    big = n > 2
    out[two] = 1.0
    nb = n[big]
    out[big] = 2.0 * (np.log(nb - 1.0) + EULER_GAMMA) - 2.0 * (nb - 1.0) / nb
    return out if out.ndim else float(out)


def nearest_rank_threshold(scores: Sequence[float], contamination: float) -> float:
    """Smallest order statistic with at most ``contamination`` of ``scores`` strictly above it.

    Nearest-rank: the ``ceil((1 - contamination) * N)``-th smallest score.
    """
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if s.size == 0:
        raise ValueError("no scores to threshold")
    if not 0.0 <= contamination < 1.0:
        raise ValueError("contamination must lie in [0, 1)")
    # guard against 0.99 * 100 landing on 99.00000000000001
    rank = math.ceil(round((1.0 - contamination) * s.size, 9))
    return float(s[max(rank, 1) - 1])


@dataclass
class IsolationForest:
    """Flattened isolation trees.

    Node arrays are concatenated over trees; ``offsets[t]`` is the root of
    tree ``t``. Internal nodes have ``feature >= 0`` and send ``x <= threshold``
    left; leaves store the number of training points that reached them.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    offsets: np.ndarray
    subsample_size: int
    n_features: int

    @property
    def tree_count(self) -> int:
        return len(self.offsets)

    @property
    def height_limit(self) -> int:
        return max(1, math.ceil(math.log2(self.subsample_size))) if self.subsample_size > 1 else 0

    @classmethod
    def fit(cls, X, tree_count: int = 100, subsample_size: int = 256, seed=0,
            height_limit: Optional[int] = None) -> "IsolationForest":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or len(X) < 2:
            raise ValueError("need at least 2 training vectors")
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite training features")
        rng = np.random.default_rng(seed)
        psi = min(subsample_size, len(X))
        limit = height_limit if height_limit is not None else max(1, math.ceil(math.log2(psi)))
        feat, thr, left, right, size, offsets = [], [], [], [], [], []
        for _ in range(tree_count):
            sample = X[rng.choice(len(X), size=psi, replace=False)]
            offsets.append(len(feat))
            # iterative build: stack of (node index, row indices, depth)
            feat.append(-1), thr.append(0.0), left.append(-1), right.append(-1), size.append(0)
            stack = [(len(feat) - 1, np.arange(psi), 0)]
            while stack:
                node, rows, depth = stack.pop()
                size[node] = len(rows)
                if len(rows) <= 1 or depth >= limit:
                    continue
                sub = sample[rows]
                lo, hi = sub.min(axis=0), sub.max(axis=0)
                live = np.flatnonzero(hi > lo)
                if live.size == 0:
                    continue
                q = int(live[rng.integers(live.size)])
                split = rng.uniform(lo[q], hi[q])
                go_left = sub[:, q] <= split
                feat[node], thr[node] = q, split
                for child_rows in (rows[go_left], rows[~go_left]):
                    feat.append(-1), thr.append(0.0), left.append(-1), right.append(-1), size.append(0)
                    child = len(feat) - 1
                    if left[node] < 0:
                        left[node] = child
                    else:
                        right[node] = child
                    stack.append((child, child_rows, depth + 1))
        return cls(
            feature=np.asarray(feat, dtype=np.int64),
            threshold=np.asarray(thr, dtype=np.float64),
            left=np.asarray(left, dtype=np.int64),
            right=np.asarray(right, dtype=np.int64),
            size=np.asarray(size, dtype=np.int64),
            offsets=np.asarray(offsets, dtype=np.int64),
            subsample_size=psi,
            n_features=X.shape[1],
        )

    def path_lengths(self, X) -> np.ndarray:
        """Per-tree path length ``depth + c(leaf size)``, shape (n, trees)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.shape[1] != self.n_features:
            raise ValueError(f"feature dimension {X.shape[1]}, forest expects {self.n_features}")
        n = len(X)
        rows = np.arange(n)
        out = np.empty((n, self.tree_count))
        leaf_adjust = average_path_length(self.size)
        for t, root in enumerate(self.offsets):
            node = np.full(n, root)
            depth = np.zeros(n)
            internal = self.feature[node] >= 0
            while internal.any():
                idx = rows[internal]
                nd = node[idx]
                go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
                node[idx] = np.where(go_left, self.left[nd], self.right[nd])
                depth[idx] += 1
                internal = self.feature[node] >= 0
            out[:, t] = depth + leaf_adjust[node]
        return out

    def score(self, X) -> np.ndarray:
        """``2 ** (-E[h(x)] / c(psi))``; larger means more anomalous."""
        mean_path = self.path_lengths(X).mean(axis=1)
        return np.power(2.0, -mean_path / average_path_length(self.subsample_size))


# ---------------------------------------------------------------------------
# scorer
# ---------------------------------------------------------------------------

class FeatureMode(str, Enum):
    RAW = "raw"
    PAIRCOS = "paircos"


@dataclass
class ScoringConfig:
    contamination: float = 0.015
    feature_mode: FeatureMode = FeatureMode.RAW
    reference_size: int = 64
    tree_count: int = 100
    subsample_size: int = 256
    seed: int = 0

    def __post_init__(self):
        self.feature_mode = FeatureMode(self.feature_mode)
        if not 0.0 < self.contamination < 0.5:
            raise ValueError("contamination must lie in (0, 0.5)")
        if self.reference_size < 1:
            raise ValueError("reference_size must be at least 1")


def _unit_rows(X):
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding")
    return X / norms


def featurize(embeddings, mode: FeatureMode, reference: Optional[np.ndarray] = None) -> np.ndarray:
    """Raw mode passes embeddings through; pairwise-cosine maps each to its cosines with ``reference``."""
    E = np.asarray(embeddings, dtype=np.float64)
    single = E.ndim == 1
    if single:
        E = E[None]
    if FeatureMode(mode) is FeatureMode.RAW:
        out = E
    else:
        if reference is None:
            raise ValueError("pairwise-cosine features need a reference set")
        if reference.shape[1] != E.shape[1]:
            raise ValueError(f"embedding dimension {E.shape[1]}, reference has {reference.shape[1]}")
        out = _unit_rows(E) @ _unit_rows(reference).T
    return out[0] if single else out


@dataclass
class ScorerModel:
    forest: IsolationForest
    feature_mode: FeatureMode
    contamination: float
    threshold: float
    reference: Optional[np.ndarray] = None
    train_scores: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)

    def features(self, embeddings) -> np.ndarray:
        return featurize(embeddings, self.feature_mode, self.reference)

    def score_features(self, features) -> np.ndarray:
        return self.forest.score(features)

    def score_embeddings(self, embeddings) -> np.ndarray:
        E = np.asarray(embeddings, dtype=np.float64)
        if E.ndim == 2 and len(E) == 0:
            return np.empty(0)
        return self.forest.score(self.features(E))

    def with_contamination(self, contamination: float) -> "ScorerModel":
        """Same forest, threshold re-set from the stored benign training scores."""
        return ScorerModel(
            forest=self.forest,
            feature_mode=self.feature_mode,
            contamination=contamination,
            threshold=nearest_rank_threshold(self.train_scores, contamination),
            reference=self.reference,
            train_scores=self.train_scores,
        )

    # -- persistence ---------------------------------------------------------

    def save(self, path: Union[str, Path]) -> None:
        f = self.forest
        meta = {
            "version": SCORER_VERSION,
            "feature_mode": self.feature_mode.value,
            "contamination": self.contamination,
            "threshold": self.threshold,
            "subsample_size": f.subsample_size,
            "n_features": f.n_features,
        }
        arrays = dict(
            feature=f.feature, threshold=f.threshold, left=f.left, right=f.right,
            size=f.size, offsets=f.offsets, train_scores=self.train_scores,
        )
        if self.reference is not None:
            arrays["reference"] = self.reference
        buf = io.BytesIO()
        np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ScorerModel":
        try:
            with np.load(path, allow_pickle=False) as z:
                data = {k: z[k] for k in z.files}
            meta = json.loads(data.pop("meta").tobytes())
        except (zipfile.BadZipFile, ValueError, KeyError, EOFError, OSError) as exc:
            raise CorruptFileError(f"{path}: unreadable scorer file ({exc})") from None
        if meta.get("version") != SCORER_VERSION:
            raise VersionError(
                f"{path}: scorer format version {meta.get('version')}, this build reads version {SCORER_VERSION}"
            )
        try:
            forest = IsolationForest(
                feature=data["feature"], threshold=data["threshold"], left=data["left"],
                right=data["right"], size=data["size"], offsets=data["offsets"],
                subsample_size=int(meta["subsample_size"]), n_features=int(meta["n_features"]),
            )
            return cls(
                forest=forest,
                feature_mode=FeatureMode(meta["feature_mode"]),
                contamination=float(meta["contamination"]),
                threshold=float(meta["threshold"]),
                reference=data.get("reference"),
                train_scores=data["train_scores"],
            )
        except KeyError as exc:
            raise CorruptFileError(f"{path}: missing field {exc}") from None


def fit(benign_embeddings, cfg: ScoringConfig = ScoringConfig()) -> ScorerModel:
    """Fit the forest on benign embeddings and set the threshold at the benign (1 - c) quantile."""
    E = np.asarray(benign_embeddings, dtype=np.float64)
    if E.ndim != 2 or len(E) < 2:
        raise ValueError("need at least 2 benign embeddings")
    rng = np.random.default_rng(cfg.seed)
    reference = None
    if cfg.feature_mode is FeatureMode.PAIRCOS:
        k = min(cfg.reference_size, len(E))
        reference = E[np.sort(rng.choice(len(E), size=k, replace=False))].copy()
    feats = featurize(E, cfg.feature_mode, reference)
    forest = IsolationForest.fit(feats, cfg.tree_count, cfg.subsample_size, seed=rng)
    train_scores = forest.score(feats)
    threshold = nearest_rank_threshold(train_scores, cfg.contamination)
    logger.info("fit forest on %d benign vectors; threshold %.5f at c=%g", len(E), threshold, cfg.contamination)
    return ScorerModel(forest, cfg.feature_mode, cfg.contamination, threshold, reference, train_scores)


def anomaly_score(model: ScorerModel, features) -> Union[float, np.ndarray]:
    s = model.score_features(features)
    return float(s[0]) if np.ndim(features) == 1 else s


@dataclass
class Detection:
    scores: np.ndarray
    flags: np.ndarray

    @property
    def flagged_fraction(self) -> float:
        return float(self.flags.mean()) if len(self.flags) else 0.0


def detect(model: ScorerModel, features) -> Detection:
    """Flag every window whose score is strictly above the threshold."""
    F = np.asarray(features, dtype=np.float64)
    if F.size == 0:
        return Detection(np.empty(0), np.empty(0, dtype=bool))
    scores = model.score_features(F)
    return Detection(scores, scores > model.threshold)

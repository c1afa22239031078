"""Neighbourhood approximating forest for case retrieval.

Trees split on case feature vectors but are scored with an external
dissimilarity between training cases: a split is good when the cases that end
up together are close under that dissimilarity. Retrieval counts how often each
training case shares a leaf with the query.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class NafError(ValueError):
    pass


@dataclass(frozen=True)
class NafConfig:
    n_trees: int = 100
    n_tests: int = 30
    min_samples_leaf: int = 2
    max_depth: int = 12
    seed: int = 0

    def __post_init__(self):
        for name in ("n_trees", "n_tests", "min_samples_leaf", "max_depth"):
            if getattr(self, name) < 1:
                raise NafError(f"{name} must be >= 1")


@dataclass
class NafNode:
    feature: int = -1
    threshold: float = 0.0
    left: "NafNode | None" = None
    right: "NafNode | None" = None
    ids: list[str] | None = None

    @property
    def is_leaf(self) -> bool:
        return self.ids is not None

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def leaves(self):
        if self.is_leaf:
            yield self
        else:
            yield from self.left.leaves()
            yield from self.right.leaves()

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"ids": self.ids}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NafNode":
        if "ids" in d:
            return cls(ids=list(d["ids"]))
        return cls(d["feature"], d["threshold"], cls.from_dict(d["left"]), cls.from_dict(d["right"]))


@dataclass
class NafModel:
    trees: list[NafNode]
    training_ids: list[str]
    config: NafConfig

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "training_ids": self.training_ids,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NafModel":
        return cls(
            [NafNode.from_dict(t) for t in d["trees"]],
            list(d["training_ids"]),
            NafConfig(**d["config"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "NafModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def to_distance(similarity: float) -> float:
    """Dice similarity in [0, 1] to the retrieval distance 1000 - 1000*s."""
    if not 0.0 <= similarity <= 1.0:
        raise NafError(f"similarity {similarity} outside [0, 1]")
    return 1000.0 - 1000.0 * similarity


def _compactness(dist: np.ndarray, members: np.ndarray) -> float:
    n = len(members)
    if n < 2:
        return 0.0
    sub = dist[np.ix_(members, members)]
    return float(sub.sum() / (n * (n - 1)))


def _grow(features, dist, members, depth, cfg, rng, ids) -> NafNode:
    n = len(members)
    if n < 2 * cfg.min_samples_leaf or depth >= cfg.max_depth:
        return NafNode(ids=[ids[i] for i in members])

    best = None
    best_score = np.inf
    for _ in range(cfg.n_tests):
        f = int(rng.integers(features.shape[1]))
        col = features[members, f]
        lo, hi = col.min(), col.max()
        if not hi > lo:
            continue
        t = float(rng.uniform(lo, hi))
        if not lo < t < hi:
            continue
        go_left = col <= t
        nl = int(go_left.sum())
        if nl < cfg.min_samples_leaf or n - nl < cfg.min_samples_leaf:
            continue
        left, right = members[go_left], members[~go_left]
        score = (nl * _compactness(dist, left) + (n - nl) * _compactness(dist, right)) / n
        if score < best_score:
            best_score = score
            best = (f, t, left, right)
    if best is None:
        return NafNode(ids=[ids[i] for i in members])
    f, t, left, right = best
    return NafNode(
        feature=f,
        threshold=t,
        left=_grow(features, dist, left, depth + 1, cfg, rng, ids),
        right=_grow(features, dist, right, depth + 1, cfg, rng, ids),
    )


def fit_naf(features, distances, cfg: NafConfig = NafConfig(), ids: Sequence[str] | None = None) -> NafModel:
    """Grow ``cfg.n_trees`` trees over an M x F feature matrix.

    ``distances`` is M x M, possibly asymmetric; it is averaged with its
    transpose for the split score only. Each tree draws its tests from a
    generator seeded by ``(cfg.seed, tree index)``.
    """
    features = np.asarray(features, dtype=np.float64)
    distances = np.asarray(distances, dtype=np.float64)
    m = features.shape[0]
    if distances.shape != (m, m):
        raise NafError(f"distance matrix shape {distances.shape} does not match {m} cases")
    if (distances < 0).any() or not np.isfinite(distances).all():
        raise NafError("distances must be finite and non-negative")
    if m < cfg.min_samples_leaf:
        raise NafError(f"{m} cases is too few for min_samples_leaf={cfg.min_samples_leaf}")
    ids = [str(i) for i in (ids if ids is not None else range(m))]
    if len(set(ids)) != m:
        raise NafError("case ids must be unique")

    sym = 0.5 * (distances + distances.T)
    np.fill_diagonal(sym, 0.0)
    members = np.arange(m)
    trees = []
    for t in range(cfg.n_trees):
        rng = np.random.default_rng([cfg.seed, t])
        trees.append(_grow(features, sym, members, 0, cfg, rng, ids))
    return NafModel(trees=trees, training_ids=ids, config=cfg)


def _descend(node: NafNode, query: np.ndarray) -> list[str]:
    while not node.is_leaf:
        node = node.left if query[node.feature] <= node.threshold else node.right
    return node.ids


def vote(m: NafModel, query) -> dict[str, int]:
    if not m.trees:
        raise NafError("empty model")
    query = np.asarray(query, dtype=np.float64)
    votes = {i: 0 for i in m.training_ids}
    for tree in m.trees:
        for i in _descend(tree, query):
            votes[i] += 1
    return votes


def retrieve_neighbors(m: NafModel, query, k: int = 3) -> list[tuple[str, int]]:
    """Top-k training ids by leaf co-occurrence votes; ties go to the smaller id."""
    if k < 1 or k > len(m.training_ids):
        raise NafError(f"k={k} outside [1, {len(m.training_ids)}]")
    votes = vote(m, query)
    ranked = sorted(votes.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]

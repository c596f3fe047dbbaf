"""Shared domain types, the score-fusion rule, and deterministic top-m selection.

Everything here is an immutable value; the two operations (:func:`fuse`,
:func:`rank_top`) are pure functions, so instances can be shared freely
across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "ConfigurationError",
    "DataError",
    "MissingPrerequisiteError",
    "Item",
    "Request",
    "ObjectiveScores",
    "ScoredItem",
    "StageSizes",
    "ProductFusion",
    "fuse",
    "rank_top",
    "sort_order",
    "rank_items",
]


class ConfigurationError(ValueError):
    """A config value or declared objective layout is invalid."""


class DataError(ValueError):
    """An input record or score violates a data invariant (non-finite, out of range)."""


class MissingPrerequisiteError(RuntimeError):
    """A required input artifact has not been produced yet."""


# Per-objective score map, e.g. {"pctr": 0.4, "bid": 8.0}.
ObjectiveScores = Mapping[str, float]


@dataclass(frozen=True)
class Item:
    """A corpus item: dense features plus the advertiser's initial bid."""

    item_id: int
    features: np.ndarray
    init_bid: float

    def __post_init__(self) -> None:
        if self.init_bid <= 0 or not math.isfinite(self.init_bid):
            raise DataError(f"item {self.item_id}: init_bid must be positive and finite")
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"item {self.item_id}: non-finite feature")


@dataclass(frozen=True)
class Request:
    """One user request carrying the candidate ids that reached pre-ranking."""

    request_id: int
    user_features: np.ndarray
    preranking_set: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.preranking_set) < 1:
            raise DataError(f"request {self.request_id}: empty pre-ranking set")
        if len(set(self.preranking_set)) != len(self.preranking_set):
            raise DataError(f"request {self.request_id}: duplicate item ids")


@dataclass(frozen=True)
class StageSizes:
    """Pipeline set sizes: pre-ranking set n, competitive set c, win set k."""

    n: int
    c: int
    k: int

    def __post_init__(self) -> None:
        if not (1 <= self.k <= self.c <= self.n):
            raise ConfigurationError(
                f"stage sizes must satisfy 1 <= k <= c <= n, got n={self.n} c={self.c} k={self.k}"
            )


@dataclass(frozen=True)
class ScoredItem:
    """An item with its per-objective scores, fused score, and 1-based rank position."""

    item_id: int
    scores: ObjectiveScores = field(compare=False)
    fused: float = 0.0
    rank_pos: int = 0


@dataclass(frozen=True)
class ProductFusion:
    """Fusion rule: the product of the named objectives' scores.

    Multiplication runs in sorted objective-name order so the result does not
    depend on declaration order.
    """

    objectives: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.objectives) == 0:
            raise ConfigurationError("fusion rule needs at least one objective")
        if len(set(self.objectives)) != len(self.objectives):
            raise ConfigurationError(f"duplicate objective in fusion rule: {self.objectives}")


def fuse(scores: ObjectiveScores, rule: ProductFusion) -> float:
    """Apply ``rule`` to one item's objective scores.

    Raises:
        ConfigurationError: a named objective is missing from ``scores``.
        DataError: a named score is not finite.
    """
    out = 1.0
    for name in sorted(rule.objectives):
        try:
            value = scores[name]
        except KeyError:
            raise ConfigurationError(f"objective {name!r} missing from scores") from None
        if not math.isfinite(value):
            raise DataError(f"objective {name!r} has non-finite score {value!r}")
        out *= value
    return out


def fuse_arrays(score_arrays: Mapping[str, np.ndarray], rule: ProductFusion) -> np.ndarray:
    """Vectorized :func:`fuse` over parallel score arrays (same semantics)."""
    out: np.ndarray | None = None
    for name in sorted(rule.objectives):
        try:
            values = score_arrays[name]
        except KeyError:
            raise ConfigurationError(f"objective {name!r} missing from scores") from None
        if not np.all(np.isfinite(values)):
            raise DataError(f"objective {name!r} has a non-finite score")
        out = values.copy() if out is None else out * values
    assert out is not None
    return out


def sort_order(item_ids: np.ndarray, fused: np.ndarray) -> np.ndarray:
    """Sort permutation: descending fused score, ties by ascending item_id.

    Negating the scores is an exact sign flip, so comparisons stay
    bit-faithful; every ranked surface in the package goes through here.
    """
    return np.lexsort((item_ids, -fused))


def rank_top(scored: Sequence[ScoredItem], m: int) -> list[int]:
    """Return ids of the ``m`` highest fused scores, sorted descending.

    Ties break by ascending item_id, which makes the result deterministic and
    (for m1 <= m2) prefix-stable. ``m`` larger than the list ranks the whole
    list; an empty list yields an empty result.
    """
    if m < 0:
        raise ConfigurationError(f"m must be >= 0, got {m}")
    if not scored:
        return []
    ids = np.asarray([s.item_id for s in scored], dtype=np.int64)
    fused = np.asarray([s.fused for s in scored], dtype=np.float64)
    order = sort_order(ids, fused)
    return [int(ids[i]) for i in order[:m]]


def rank_items(
    item_ids: Sequence[int],
    score_arrays: Mapping[str, np.ndarray],
    rule: ProductFusion,
) -> list[ScoredItem]:
    """Fuse per-objective score arrays and rank, assigning 1-based positions.

    Output is sorted by rank position; ``scores`` on each entry holds that
    item's slice of every objective array.
    """
    ids = np.asarray(item_ids, dtype=np.int64)
    fused = fuse_arrays(score_arrays, rule)
    if ids.shape != fused.shape:
        raise ConfigurationError("item_ids and score arrays disagree on length")
    order = sort_order(ids, fused)
    out = []
    for pos, idx in enumerate(order, start=1):
        scores = {name: float(score_arrays[name][idx]) for name in rule.objectives}
        out.append(
            ScoredItem(item_id=int(ids[idx]), scores=scores, fused=float(fused[idx]), rank_pos=pos)
        )
    return out

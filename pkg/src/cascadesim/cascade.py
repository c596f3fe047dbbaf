"""Two-stage pipeline execution, the offline rank-score simulator, substitution.

A pipeline holds one score source per objective for each stage. Sources are
duck-typed: anything with ``scores(ctx) -> array`` works, which is how bid
columns ("init", "opt") sit next to learned predictors in the same fusion.

Per request, the pre-ranking stage scores the whole pre-ranking set and keeps
the top c (competitive set); the ranking stage scores only those c items and
keeps the top k (win set). The simulator pass instead runs the ranking models
over the full pre-ranking set, producing the ideal win set the consistency
metric compares against.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import (
    ConfigurationError,
    DataError,
    ProductFusion,
    Request,
    StageSizes,
    fuse_arrays,
    sort_order,
)
from .models import Predictor, forward_batch
from .synthworld import (
    GroundTruth,
    World,
    opt_bid_multiplier_matrix,
    true_ctr_matrix,
)

__all__ = [
    "RequestContext",
    "ScoreSource",
    "ModelSource",
    "InitBidSource",
    "OptBidSource",
    "TrueCtrSource",
    "TableSource",
    "ScaledSource",
    "Pipeline",
    "ServiceRecord",
    "SimulatorRecord",
    "RunResult",
    "SimResult",
    "build_context",
    "run_request",
    "run_simulator",
    "run_stream",
    "substitute",
    "consistent_pipeline",
]

_PROB_FLOOR = 1e-12
_PROB_CEIL = 1.0 - 1e-12

MODEL_TRANSFORMS = ("sigmoid", "exp")


@dataclass(frozen=True)
class RequestContext:
    """Everything a score source may look at for one request."""

    request_id: int
    item_ids: tuple[int, ...]
    phi: np.ndarray
    init_bids: np.ndarray

    def subset(self, rows: Sequence[int]) -> "RequestContext":
        rows = list(rows)
        return RequestContext(
            request_id=self.request_id,
            item_ids=tuple(self.item_ids[r] for r in rows),
            phi=self.phi[rows],
            init_bids=self.init_bids[rows],
        )


class ScoreSource(Protocol):
    def scores(self, ctx: RequestContext) -> np.ndarray: ...


@dataclass(frozen=True)
class ModelSource:
    """A trained predictor serving either probabilities or positive multipliers.

    ``sigmoid`` is the calibratable probability head; ``exp`` keeps the score
    strictly positive so a bid can multiply it without breaking monotonicity.
    """

    predictor: Predictor
    transform: str = "sigmoid"

    def __post_init__(self) -> None:
        if self.transform not in MODEL_TRANSFORMS:
            raise ConfigurationError(
                f"unknown transform {self.transform!r}, expected one of {MODEL_TRANSFORMS}"
            )

    def scores(self, ctx: RequestContext) -> np.ndarray:
        logits = forward_batch(self.predictor, ctx.phi)
        if self.transform == "sigmoid":
            out = np.empty_like(logits)
            pos = logits >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
            ez = np.exp(logits[~pos])
            out[~pos] = ez / (1.0 + ez)
            return np.clip(out, _PROB_FLOOR, _PROB_CEIL)
        return np.exp(logits)


@dataclass(frozen=True)
class InitBidSource:
    """The advertiser's bid, verbatim."""

    def scores(self, ctx: RequestContext) -> np.ndarray:
        return ctx.init_bids.copy()


@dataclass(frozen=True)
class OptBidSource:
    """System-optimized bid: init bid times the world's hidden multiplier."""

    gt: GroundTruth

    def scores(self, ctx: RequestContext) -> np.ndarray:
        return ctx.init_bids * opt_bid_multiplier_matrix(self.gt, ctx.phi)


@dataclass(frozen=True)
class TrueCtrSource:
    """The hidden click probability itself; an oracle upper bound for tests."""

    gt: GroundTruth

    def scores(self, ctx: RequestContext) -> np.ndarray:
        return true_ctr_matrix(self.gt, ctx.phi)


@dataclass(frozen=True)
class TableSource:
    """Explicit per-item scores, for hand-authored fixtures."""

    table: Mapping[int, float]

    def scores(self, ctx: RequestContext) -> np.ndarray:
        try:
            return np.array([self.table[i] for i in ctx.item_ids], dtype=np.float64)
        except KeyError as exc:
            raise DataError(f"no fixture score for item_id {exc.args[0]}") from None


@dataclass(frozen=True)
class ScaledSource:
    """A positive global rescale of another source.

    Rescaling changes calibration but, the fusion being a product, never the
    ordering; this is the knob the scale-separation checks turn.
    """

    base: ScoreSource
    factor: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.factor) and self.factor > 0):
            raise ConfigurationError(f"scale factor must be positive, got {self.factor}")

    def scores(self, ctx: RequestContext) -> np.ndarray:
        return self.base.scores(ctx) * self.factor


@dataclass(frozen=True)
class Pipeline:
    """Per-objective sources for both stages plus the shared fusion rule."""

    prerank: Mapping[str, ScoreSource]
    rank: Mapping[str, ScoreSource]
    fusion: ProductFusion
    sizes: StageSizes

    def __post_init__(self) -> None:
        pre_names = set(self.prerank)
        rank_names = set(self.rank)
        if not pre_names:
            raise ConfigurationError("pipeline needs at least one objective")
        if pre_names != rank_names:
            raise ConfigurationError(
                f"stage objective sets differ: prerank {sorted(pre_names)} vs rank {sorted(rank_names)}"
            )
        if set(self.fusion.objectives) != pre_names:
            raise ConfigurationError(
                f"fusion objectives {sorted(self.fusion.objectives)} do not match "
                f"pipeline objectives {sorted(pre_names)}"
            )


@dataclass(frozen=True)
class ServiceRecord:
    """One pre-ranking-stage log row; the full pre-ranking set is logged."""

    request_id: int
    item_id: int
    scores: Mapping[str, float]
    g_score: float
    pre_rank_pos: int
    pv: int = 1


@dataclass(frozen=True)
class SimulatorRecord:
    """One simulator log row: ranking-model scores over the pre-ranking set."""

    request_id: int
    item_id: int
    scores: Mapping[str, float]
    g_score: float
    rank_pos: int
    pv: int = 1


@dataclass(frozen=True)
class RunResult:
    records: tuple[ServiceRecord, ...]
    competitive_set: tuple[int, ...]
    win_set: tuple[int, ...]


@dataclass(frozen=True)
class SimResult:
    records: tuple[SimulatorRecord, ...]
    ideal_win_set: tuple[int, ...]


def build_context(req: Request, world: World) -> RequestContext:
    return RequestContext(
        request_id=req.request_id,
        item_ids=tuple(req.preranking_set),
        phi=world.request_phi(req),
        init_bids=world.init_bids(req.preranking_set),
    )


def _stage_scores(
    sources: Mapping[str, ScoreSource], ctx: RequestContext
) -> dict[str, np.ndarray]:
    return {name: np.asarray(src.scores(ctx), dtype=np.float64) for name, src in sources.items()}


def _ordered(ctx: RequestContext, fused: np.ndarray) -> np.ndarray:
    return sort_order(np.array(ctx.item_ids, dtype=np.int64), fused)


def run_request(req: Request, pipeline: Pipeline, world: World) -> RunResult:
    """Serve one request through both stages; logs carry pre-rank scores."""
    ctx = build_context(req, world)
    score_arrays = _stage_scores(pipeline.prerank, ctx)
    fused = fuse_arrays(score_arrays, pipeline.fusion)
    order = _ordered(ctx, fused)

    pos = np.empty(len(order), dtype=np.int64)
    pos[order] = np.arange(1, len(order) + 1)
    records = tuple(
        ServiceRecord(
            request_id=req.request_id,
            item_id=ctx.item_ids[i],
            scores={name: float(arr[i]) for name, arr in score_arrays.items()},
            g_score=float(fused[i]),
            pre_rank_pos=int(pos[i]),
        )
        for i in range(len(ctx.item_ids))
    )

    c_rows = order[: pipeline.sizes.c]
    competitive = tuple(ctx.item_ids[i] for i in c_rows)

    sub = ctx.subset(c_rows)
    rank_arrays = _stage_scores(pipeline.rank, sub)
    rank_fused = fuse_arrays(rank_arrays, pipeline.fusion)
    rank_order = _ordered(sub, rank_fused)
    win = tuple(sub.item_ids[i] for i in rank_order[: pipeline.sizes.k])
    return RunResult(records=records, competitive_set=competitive, win_set=win)


def run_simulator(req: Request, pipeline: Pipeline, world: World) -> SimResult:
    """Score the full pre-ranking set with the ranking models (no funnel)."""
    ctx = build_context(req, world)
    score_arrays = _stage_scores(pipeline.rank, ctx)
    fused = fuse_arrays(score_arrays, pipeline.fusion)
    order = _ordered(ctx, fused)
    pos = np.empty(len(order), dtype=np.int64)
    pos[order] = np.arange(1, len(order) + 1)
    records = tuple(
        SimulatorRecord(
            request_id=req.request_id,
            item_id=ctx.item_ids[i],
            scores={name: float(arr[i]) for name, arr in score_arrays.items()},
            g_score=float(fused[i]),
            rank_pos=int(pos[i]),
        )
        for i in range(len(ctx.item_ids))
    )
    ideal = tuple(ctx.item_ids[i] for i in order[: pipeline.sizes.k])
    return SimResult(records=records, ideal_win_set=ideal)


def run_stream(
    requests: Sequence[Request], pipeline: Pipeline, world: World
) -> tuple[list[ServiceRecord], list[SimulatorRecord]]:
    """Service and simulator logs for a request stream, in request order."""
    service: list[ServiceRecord] = []
    sim: list[SimulatorRecord] = []
    for req in requests:
        service.extend(run_request(req, pipeline, world).records)
        sim.extend(run_simulator(req, pipeline, world).records)
    return service, sim


def substitute(
    pipeline: Pipeline, stage: str, objective: str, replacement: ScoreSource
) -> Pipeline:
    """New pipeline with exactly one slot replaced; the original is untouched."""
    if stage != "prerank":
        raise ConfigurationError(f"only the prerank stage is substitutable, got {stage!r}")
    if objective not in pipeline.prerank:
        raise ConfigurationError(
            f"unknown objective {objective!r}, pipeline has {sorted(pipeline.prerank)}"
        )
    slots = dict(pipeline.prerank)
    slots[objective] = replacement
    return replace(pipeline, prerank=slots)


def consistent_pipeline(pipeline: Pipeline) -> Pipeline:
    """Every prerank slot replaced by its rank counterpart."""
    return replace(pipeline, prerank=dict(pipeline.rank))

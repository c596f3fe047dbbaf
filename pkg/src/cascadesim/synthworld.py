"""Synthetic ad world: corpus, requests, hidden click model, bids, exposure logs.

The world is fully determined by a single 64-bit seed. Independent random
streams (corpus, requests, clicks, ...) are derived with
``numpy.random.SeedSequence`` entropy lists, and per-request streams fold in
the request id, so requests can be generated or replayed in any order with
identical results.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .core import ConfigurationError, DataError, Item, Request, StageSizes

__all__ = [
    "WorldConfig",
    "GroundTruth",
    "World",
    "ExposureRecord",
    "phi_dim",
    "combine_features",
    "combine_features_matrix",
    "gen_corpus",
    "gen_ground_truth",
    "gen_request",
    "make_requests",
    "true_ctr",
    "true_ctr_matrix",
    "opt_bid",
    "opt_bid_multiplier_matrix",
    "sample_click",
    "collect_exposure_log",
    "sigmoid",
]

INTERACTIONS = ("concat", "concat_prod")

# Stream tags keep derived seed sequences disjoint across purposes.
STREAM_CORPUS = 0
STREAM_GROUND_TRUTH = 1
STREAM_REQUEST = 2
STREAM_CLICK = 3

# Evaluation requests live on a disjoint id range so their derived streams
# never collide with the training stream.
EVAL_REQUEST_ID_BASE = 1 << 32

# Hidden click model scale: logit std around this value, negative bias keeps
# base CTR at realistic ad levels while leaving plenty of spread.
_CTR_LOGIT_STD = 1.5
_CTR_BIAS = -1.5
_OPT_LOGIT_STD = 1.0

_PROB_FLOOR = 1e-12
_PROB_CEIL = 1.0 - 1e-12


def derived_rng(seed: int, *entropy: int) -> np.random.Generator:
    """Generator for the stream identified by (seed, *entropy)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=[seed, *entropy])))


def sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    """Numerically stable logistic function, clamped to the open unit interval."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    out = np.clip(out, _PROB_FLOOR, _PROB_CEIL)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class WorldConfig:
    d: int
    d_u: int
    corpus_size: int
    requests_per_epoch: int
    sizes: StageSizes
    seed: int
    bid_range: tuple[float, float] = (0.5, 5.0)
    interaction: str = "concat_prod"

    def __post_init__(self) -> None:
        if self.d < 1 or self.d_u < 1:
            raise ConfigurationError("feature dimensions d and d_u must be >= 1")
        # corpus_size >= n is enforced where requests are drawn, so degenerate
        # corpora (even empty ones) can still be generated and inspected.
        if self.corpus_size < 0:
            raise ConfigurationError("corpus_size must be >= 0")
        if self.requests_per_epoch < 1:
            raise ConfigurationError("requests_per_epoch must be >= 1")
        lo, hi = self.bid_range
        if not (0 < lo <= hi):
            raise ConfigurationError(f"bid_range must satisfy 0 < lo <= hi, got {self.bid_range}")
        if self.interaction not in INTERACTIONS:
            raise ConfigurationError(
                f"unknown interaction {self.interaction!r}, expected one of {INTERACTIONS}"
            )


@dataclass(frozen=True)
class GroundTruth:
    """Hidden linear click model and opt-bid multiplier weights over phi."""

    w_ctr: np.ndarray
    b_ctr: float
    w_opt: np.ndarray

    def __post_init__(self) -> None:
        if not (np.all(np.isfinite(self.w_ctr)) and np.all(np.isfinite(self.w_opt))):
            raise DataError("ground-truth weights must be finite")
        if not np.isfinite(self.b_ctr):
            raise DataError("ground-truth bias must be finite")


@dataclass(frozen=True)
class ExposureRecord:
    """One exposed (win-set) item with its frozen click label."""

    request_id: int
    item_id: int
    phi: np.ndarray
    click: int


def phi_dim(cfg: WorldConfig) -> int:
    """Dimension of the combined feature map for this world."""
    if cfg.interaction == "concat":
        return cfg.d_u + cfg.d
    return cfg.d_u + cfg.d + min(cfg.d_u, cfg.d)


def combine_features(
    user_features: np.ndarray, item_features: np.ndarray, interaction: str = "concat_prod"
) -> np.ndarray:
    """Map (user, item) feature vectors to the model input phi.

    ``concat_prod`` appends the elementwise product of the shared prefix, so
    the hidden click model is not additively separable in user and item.
    """
    if interaction == "concat":
        return np.concatenate([user_features, item_features])
    p = min(len(user_features), len(item_features))
    return np.concatenate([user_features, item_features, user_features[:p] * item_features[:p]])


def combine_features_matrix(
    user_features: np.ndarray, item_matrix: np.ndarray, interaction: str = "concat_prod"
) -> np.ndarray:
    """Vectorized :func:`combine_features` for one user against many items."""
    n = item_matrix.shape[0]
    u = np.broadcast_to(user_features, (n, user_features.shape[0]))
    if interaction == "concat":
        return np.hstack([u, item_matrix])
    p = min(user_features.shape[0], item_matrix.shape[1])
    return np.hstack([u, item_matrix, u[:, :p] * item_matrix[:, :p]])


def gen_corpus(cfg: WorldConfig) -> list[Item]:
    """Draw the item corpus: i.i.d. standard-normal features, uniform init bids."""
    rng = derived_rng(cfg.seed, STREAM_CORPUS)
    lo, hi = cfg.bid_range
    items = []
    for item_id in range(cfg.corpus_size):
        features = rng.standard_normal(cfg.d)
        init_bid = float(rng.uniform(lo, hi))
        items.append(Item(item_id=item_id, features=features, init_bid=init_bid))
    return items


def gen_ground_truth(cfg: WorldConfig) -> GroundTruth:
    """Draw the hidden click model and opt-bid weights for this world's seed."""
    rng = derived_rng(cfg.seed, STREAM_GROUND_TRUTH)
    dim = phi_dim(cfg)
    w_ctr = rng.standard_normal(dim) * (_CTR_LOGIT_STD / np.sqrt(dim))
    w_opt = rng.standard_normal(dim) * (_OPT_LOGIT_STD / np.sqrt(dim))
    return GroundTruth(w_ctr=w_ctr, b_ctr=_CTR_BIAS, w_opt=w_opt)


@dataclass(frozen=True)
class World:
    """A generated world: config, corpus, and the hidden ground truth."""

    cfg: WorldConfig
    items: tuple[Item, ...]
    gt: GroundTruth

    @cached_property
    def item_lookup(self) -> dict[int, Item]:
        return {item.item_id: item for item in self.items}

    def item_matrix(self, item_ids: Sequence[int]) -> np.ndarray:
        lookup = self.item_lookup
        try:
            return np.stack([lookup[i].features for i in item_ids])
        except KeyError as exc:
            raise DataError(f"unknown item_id {exc.args[0]}") from None

    def init_bids(self, item_ids: Sequence[int]) -> np.ndarray:
        lookup = self.item_lookup
        try:
            return np.array([lookup[i].init_bid for i in item_ids], dtype=np.float64)
        except KeyError as exc:
            raise DataError(f"unknown item_id {exc.args[0]}") from None

    def request_phi(self, req: Request) -> np.ndarray:
        """phi rows for every item in the request's pre-ranking set."""
        return combine_features_matrix(
            req.user_features, self.item_matrix(req.preranking_set), self.cfg.interaction
        )


def generate_world(cfg: WorldConfig) -> World:
    return World(cfg=cfg, items=tuple(gen_corpus(cfg)), gt=gen_ground_truth(cfg))


def gen_request(
    cfg: WorldConfig, corpus: Sequence[Item], rng: np.random.Generator, request_id: int
) -> Request:
    """Sample one request: fresh user features plus a uniform candidate subset."""
    n = cfg.sizes.n
    if len(corpus) == 0:
        raise ConfigurationError("corpus is empty")
    if n > len(corpus):
        raise ConfigurationError(f"pre-ranking set size n ({n}) exceeds corpus size ({len(corpus)})")
    user_features = rng.standard_normal(cfg.d_u)
    chosen = rng.choice(len(corpus), size=n, replace=False)
    preranking_set = tuple(int(corpus[i].item_id) for i in chosen)
    return Request(request_id=request_id, user_features=user_features, preranking_set=preranking_set)


def make_requests(
    cfg: WorldConfig, corpus: Sequence[Item], count: int, *, eval_stream: bool = False
) -> list[Request]:
    """Generate ``count`` requests on a per-request derived seed stream.

    The evaluation stream uses a disjoint request-id range, so it is a fresh
    branch that never overlaps training requests.
    """
    base = EVAL_REQUEST_ID_BASE if eval_stream else 0
    out = []
    for i in range(count):
        request_id = base + i
        rng = derived_rng(cfg.seed, STREAM_REQUEST, request_id)
        out.append(gen_request(cfg, corpus, rng, request_id))
    return out


def _check_phi_dim(gt: GroundTruth, phi: np.ndarray) -> None:
    if phi.shape[-1] != gt.w_ctr.shape[0]:
        raise ConfigurationError(
            f"phi dimension {phi.shape[-1]} does not match ground truth dimension {gt.w_ctr.shape[0]}"
        )


def true_ctr(
    gt: GroundTruth,
    user_features: np.ndarray,
    item_features: np.ndarray,
    interaction: str = "concat_prod",
) -> float:
    """Hidden click probability for one (user, item) pair; strictly inside (0, 1)."""
    phi = combine_features(user_features, item_features, interaction)
    _check_phi_dim(gt, phi)
    return float(sigmoid(phi @ gt.w_ctr + gt.b_ctr))


def true_ctr_matrix(gt: GroundTruth, phi: np.ndarray) -> np.ndarray:
    _check_phi_dim(gt, phi)
    return sigmoid(phi @ gt.w_ctr + gt.b_ctr)


def opt_bid(
    gt: GroundTruth,
    init_bid: float,
    user_features: np.ndarray,
    item_features: np.ndarray,
    interaction: str = "concat_prod",
) -> float:
    """System-optimized bid: init bid times a traffic-quality multiplier in (0.5, 2)."""
    if init_bid <= 0:
        raise DataError(f"init_bid must be positive, got {init_bid}")
    phi = combine_features(user_features, item_features, interaction)
    _check_phi_dim(gt, phi)
    return init_bid * (0.5 + 1.5 * float(sigmoid(phi @ gt.w_opt)))


def opt_bid_multiplier_matrix(gt: GroundTruth, phi: np.ndarray) -> np.ndarray:
    _check_phi_dim(gt, phi)
    return 0.5 + 1.5 * sigmoid(phi @ gt.w_opt)


def sample_click(p: float, rng: np.random.Generator) -> int:
    """One Bernoulli(p) draw; p must lie strictly inside (0, 1)."""
    if not (0.0 < p < 1.0):
        raise DataError(f"click probability must lie in (0, 1), got {p}")
    return int(rng.random() < p)


def collect_exposure_log(pipeline, requests: Iterable[Request], world: World) -> list[ExposureRecord]:
    """Run the pipeline and label each request's win-set items with sampled clicks.

    This is the production training log: only exposed (win-set) items appear,
    so the label support is a biased subset of the pre-ranking set whenever
    k < n. Click draws use per-request derived streams and are frozen here;
    nothing resamples them later.
    """
    from .cascade import run_request

    out = []
    for req in requests:
        result = run_request(req, pipeline, world)
        click_rng = derived_rng(world.cfg.seed, STREAM_CLICK, req.request_id)
        phi = world.request_phi(req)
        row_of = {item_id: i for i, item_id in enumerate(req.preranking_set)}
        for item_id in result.win_set:
            row = row_of[item_id]
            p = true_ctr_matrix(world.gt, phi[row : row + 1])[0]
            click = sample_click(float(p), click_rng)
            out.append(
                ExposureRecord(request_id=req.request_id, item_id=item_id, phi=phi[row], click=click)
            )
    return out

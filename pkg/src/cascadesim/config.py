"""Experiment configuration: JSON schema, parsing, and validation.

A config file is a single JSON document. Two shapes are accepted:

* a world experiment: `seed`, `out_dir`, `world`, `eval_requests`, `tiers`,
  `evaluation` — drives the full generate/train/simulate/evaluate flow;
* a fixture experiment: `seed`, `out_dir`, `fixture` (hand-set items with
  per-stage scores), optional `evaluation` — emits ready-made logs for
  metric-level checks without training anything.

Every validation error carries the dotted field path of the offending value
(for example ``world.sizes.n``) so failures are actionable from the CLI.
The only environment override honored anywhere is the output directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Mapping

from .core import ConfigurationError, StageSizes
from .models import LOSS_KINDS, TrainConfig
from .synthworld import INTERACTIONS, WorldConfig

__all__ = [
    "TierConfig",
    "EvalConfig",
    "FixtureItem",
    "FixtureConfig",
    "ExperimentConfig",
    "load_config",
    "parse_experiment",
    "TRANSFORMS",
]

TRANSFORMS = ("sigmoid", "exp")


@dataclass(frozen=True)
class TierConfig:
    """One pre-ranking (or ranking) model tier: architecture plus training."""

    hidden_dims: tuple[int, ...]
    mask_fraction: float
    transform: str
    training: TrainConfig
    samples_per_request: int = 50
    train_from: str | None = None

    def __post_init__(self) -> None:
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigurationError("hidden_dims entries must be >= 1")
        if not (0 < self.mask_fraction <= 1):
            raise ConfigurationError(
                f"mask_fraction must be in (0, 1], got {self.mask_fraction}"
            )
        if self.transform not in TRANSFORMS:
            raise ConfigurationError(
                f"unknown transform {self.transform!r}, expected one of {TRANSFORMS}"
            )
        if self.samples_per_request < 1:
            raise ConfigurationError("samples_per_request must be >= 1")
        if self.train_from is not None and not self.train_from.strip():
            raise ConfigurationError("train_from must be a pipeline spec string")


@dataclass(frozen=True)
class EvalConfig:
    """RCS grid and calibration settings for the evaluate verb."""

    k_grid: tuple[int, ...]
    c_grid: tuple[int, ...]
    mode: str = "macro"
    ece_buckets: int = 50

    def __post_init__(self) -> None:
        if not self.k_grid or not self.c_grid:
            raise ConfigurationError("k_grid and c_grid must be non-empty")
        if any(k < 1 for k in self.k_grid) or any(c < 1 for c in self.c_grid):
            raise ConfigurationError("grid values must be >= 1")
        if self.mode not in ("macro", "micro"):
            raise ConfigurationError(f"mode must be 'macro' or 'micro', got {self.mode!r}")
        if self.ece_buckets < 1:
            raise ConfigurationError("ece_buckets must be >= 1")
        if min(self.k_grid) > max(self.c_grid):
            raise ConfigurationError(
                "no grid point satisfies k <= c: "
                f"min k is {min(self.k_grid)}, max c is {max(self.c_grid)}"
            )

    def pairs(self) -> list[tuple[int, int]]:
        """All (k, c) grid points with k <= c, in declaration order."""
        return [(k, c) for k in self.k_grid for c in self.c_grid if k <= c]


@dataclass(frozen=True)
class FixtureItem:
    item_id: int
    prerank: Mapping[str, float]
    rank: Mapping[str, float]


@dataclass(frozen=True)
class FixtureConfig:
    """Hand-set items with explicit per-stage scores; no learning involved."""

    items: tuple[FixtureItem, ...]
    k: int
    c: int

    def __post_init__(self) -> None:
        if not self.items:
            raise ConfigurationError("fixture needs at least one item")
        ids = [it.item_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("fixture item ids must be unique")
        names = set(self.items[0].prerank)
        for it in self.items:
            if set(it.prerank) != names or set(it.rank) != names:
                raise ConfigurationError(
                    "every fixture item must score the same objectives in both stages"
                )
        if not (1 <= self.k <= self.c <= len(self.items)):
            raise ConfigurationError(
                f"fixture requires 1 <= k <= c <= item count, got k={self.k}, "
                f"c={self.c}, items={len(self.items)}"
            )


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out_dir: str
    world: WorldConfig | None
    eval_requests: int
    tiers: Mapping[str, TierConfig]
    evaluation: EvalConfig
    fixture: FixtureConfig | None = None

    def tier(self, name: str) -> TierConfig:
        if name not in self.tiers:
            raise ConfigurationError(
                f"tier {name!r} is not defined; config defines {list(self.tiers)}"
            )
        return self.tiers[name]


class _Ctx:
    """Cursor over the raw JSON tree that reports dotted field paths."""

    def __init__(self, obj: Any, path: str):
        self.obj = obj
        self.path = path

    def fail(self, message: str) -> ConfigurationError:
        return ConfigurationError(f"{self.path}: {message}")

    def mapping(self) -> dict:
        if not isinstance(self.obj, dict):
            raise self.fail(f"expected an object, got {type(self.obj).__name__}")
        return self.obj

    def child(self, key: str) -> "_Ctx":
        return _Ctx(self.mapping()[key], f"{self.path}.{key}" if self.path else key)

    def require_keys(self, required: tuple[str, ...], optional: tuple[str, ...] = ()) -> None:
        obj = self.mapping()
        missing = [k for k in required if k not in obj]
        if missing:
            raise self.fail(f"missing required field(s): {', '.join(missing)}")
        unknown = [k for k in obj if k not in required and k not in optional]
        if unknown:
            raise self.fail(f"unknown field(s): {', '.join(unknown)}")

    def int_(self) -> int:
        if isinstance(self.obj, bool) or not isinstance(self.obj, int):
            raise self.fail(f"expected an integer, got {self.obj!r}")
        return self.obj

    def float_(self) -> float:
        if isinstance(self.obj, bool) or not isinstance(self.obj, (int, float)):
            raise self.fail(f"expected a number, got {self.obj!r}")
        return float(self.obj)

    def str_(self) -> str:
        if not isinstance(self.obj, str):
            raise self.fail(f"expected a string, got {self.obj!r}")
        return self.obj

    def int_list(self) -> tuple[int, ...]:
        if not isinstance(self.obj, list):
            raise self.fail(f"expected a list of integers, got {self.obj!r}")
        return tuple(_Ctx(v, f"{self.path}[{i}]").int_() for i, v in enumerate(self.obj))

    def items(self) -> list["_Ctx"]:
        if not isinstance(self.obj, list):
            raise self.fail(f"expected a list, got {type(self.obj).__name__}")
        return [_Ctx(v, f"{self.path}[{i}]") for i, v in enumerate(self.obj)]


def _rescope(ctx: _Ctx, exc: ConfigurationError) -> ConfigurationError:
    """Prefix dataclass-level messages with the config path they came from."""
    return ConfigurationError(f"{ctx.path}: {exc}")


def _parse_sizes(ctx: _Ctx) -> StageSizes:
    ctx.require_keys(("n", "c", "k"))
    n = ctx.child("n").int_()
    c = ctx.child("c").int_()
    k = ctx.child("k").int_()
    try:
        return StageSizes(n=n, c=c, k=k)
    except ConfigurationError as exc:
        raise _rescope(ctx, exc) from None


def _parse_world(ctx: _Ctx, seed: int) -> WorldConfig:
    ctx.require_keys(
        ("d", "d_u", "corpus_size", "requests_per_epoch", "sizes"),
        ("bid_range", "interaction"),
    )
    obj = ctx.mapping()
    sizes = _parse_sizes(ctx.child("sizes"))
    bid_range = (0.5, 5.0)
    if "bid_range" in obj:
        bid_ctx = ctx.child("bid_range")
        if not (isinstance(bid_ctx.obj, list) and len(bid_ctx.obj) == 2):
            raise bid_ctx.fail("expected [low, high]")
        bid_range = (
            _Ctx(bid_ctx.obj[0], f"{bid_ctx.path}[0]").float_(),
            _Ctx(bid_ctx.obj[1], f"{bid_ctx.path}[1]").float_(),
        )
    interaction = "concat_prod"
    if "interaction" in obj:
        interaction = ctx.child("interaction").str_()
        if interaction not in INTERACTIONS:
            raise ctx.child("interaction").fail(
                f"unknown interaction {interaction!r}, expected one of {INTERACTIONS}"
            )
    corpus_size = ctx.child("corpus_size").int_()
    if sizes.n > corpus_size:
        raise ConfigurationError(
            f"{ctx.path}.sizes.n ({sizes.n}) exceeds {ctx.path}.corpus_size "
            f"({corpus_size}); the pre-ranking set is drawn from the corpus"
        )
    try:
        return WorldConfig(
            d=ctx.child("d").int_(),
            d_u=ctx.child("d_u").int_(),
            corpus_size=corpus_size,
            requests_per_epoch=ctx.child("requests_per_epoch").int_(),
            sizes=sizes,
            seed=seed,
            bid_range=bid_range,
            interaction=interaction,
        )
    except ConfigurationError as exc:
        raise _rescope(ctx, exc) from None


def _parse_training(ctx: _Ctx) -> TrainConfig:
    ctx.require_keys(
        ("loss", "learning_rate", "epochs", "batch_size"), ("chunks", "seed")
    )
    obj = ctx.mapping()
    loss = ctx.child("loss").str_()
    if loss not in LOSS_KINDS:
        raise ctx.child("loss").fail(
            f"unknown loss {loss!r}, expected one of {LOSS_KINDS}"
        )
    try:
        return TrainConfig(
            loss=loss,
            learning_rate=ctx.child("learning_rate").float_(),
            epochs=ctx.child("epochs").int_(),
            batch_size=ctx.child("batch_size").int_(),
            chunks=ctx.child("chunks").int_() if "chunks" in obj else 2,
            seed=ctx.child("seed").int_() if "seed" in obj else 0,
        )
    except ConfigurationError as exc:
        raise _rescope(ctx, exc) from None


def _parse_tier(ctx: _Ctx) -> TierConfig:
    ctx.require_keys(
        ("hidden_dims", "mask_fraction", "transform", "training"),
        ("samples_per_request", "train_from"),
    )
    obj = ctx.mapping()
    try:
        return TierConfig(
            hidden_dims=ctx.child("hidden_dims").int_list(),
            mask_fraction=ctx.child("mask_fraction").float_(),
            transform=ctx.child("transform").str_(),
            training=_parse_training(ctx.child("training")),
            samples_per_request=(
                ctx.child("samples_per_request").int_()
                if "samples_per_request" in obj
                else 50
            ),
            train_from=ctx.child("train_from").str_() if "train_from" in obj else None,
        )
    except ConfigurationError as exc:
        if str(exc).startswith(ctx.path + "."):
            raise
        raise _rescope(ctx, exc) from None


def _parse_evaluation(ctx: _Ctx) -> EvalConfig:
    ctx.require_keys(("k_grid", "c_grid"), ("mode", "ece_buckets"))
    obj = ctx.mapping()
    try:
        return EvalConfig(
            k_grid=ctx.child("k_grid").int_list(),
            c_grid=ctx.child("c_grid").int_list(),
            mode=ctx.child("mode").str_() if "mode" in obj else "macro",
            ece_buckets=(
                ctx.child("ece_buckets").int_() if "ece_buckets" in obj else 50
            ),
        )
    except ConfigurationError as exc:
        if str(exc).startswith(ctx.path + "."):
            raise
        raise _rescope(ctx, exc) from None


def _parse_fixture_item(ctx: _Ctx) -> FixtureItem:
    ctx.require_keys(("item_id", "prerank", "rank"))

    def score_map(c: _Ctx) -> dict[str, float]:
        out = {}
        for name in c.mapping():
            out[name] = c.child(name).float_()
        if not out:
            raise c.fail("needs at least one objective score")
        return out

    return FixtureItem(
        item_id=ctx.child("item_id").int_(),
        prerank=score_map(ctx.child("prerank")),
        rank=score_map(ctx.child("rank")),
    )


def _parse_fixture(ctx: _Ctx) -> FixtureConfig:
    ctx.require_keys(("items", "k", "c"))
    try:
        return FixtureConfig(
            items=tuple(_parse_fixture_item(c) for c in ctx.child("items").items()),
            k=ctx.child("k").int_(),
            c=ctx.child("c").int_(),
        )
    except ConfigurationError as exc:
        if str(exc).startswith(ctx.path + "."):
            raise
        raise _rescope(ctx, exc) from None


def parse_experiment(
    obj: Any, *, seed_override: int | None = None, out_override: str | None = None
) -> ExperimentConfig:
    """Validate a parsed JSON document into an ExperimentConfig."""
    root = _Ctx(obj, "")
    raw = root.mapping()
    if "fixture" in raw:
        root.require_keys(("seed", "out_dir", "fixture"), ("evaluation",))
    else:
        root.require_keys(
            ("seed", "out_dir", "world", "eval_requests", "tiers"), ("evaluation",)
        )
    seed = root.child("seed").int_() if seed_override is None else seed_override
    out_dir = root.child("out_dir").str_() if out_override is None else out_override

    if "fixture" in raw:
        fixture = _parse_fixture(root.child("fixture"))
        if "evaluation" in raw:
            evaluation = _parse_evaluation(root.child("evaluation"))
        else:
            evaluation = EvalConfig(k_grid=(fixture.k,), c_grid=(fixture.c,))
        if max(evaluation.c_grid) > len(fixture.items):
            raise ConfigurationError(
                f"evaluation.c_grid max ({max(evaluation.c_grid)}) exceeds "
                f"fixture item count ({len(fixture.items)})"
            )
        return ExperimentConfig(
            seed=seed,
            out_dir=out_dir,
            world=None,
            eval_requests=1,
            tiers={},
            evaluation=evaluation,
            fixture=fixture,
        )

    world = _parse_world(root.child("world"), seed)
    eval_requests = root.child("eval_requests").int_()
    if eval_requests < 1:
        raise root.child("eval_requests").fail("must be >= 1")

    tiers_ctx = root.child("tiers")
    tiers: dict[str, TierConfig] = {}
    for name in tiers_ctx.mapping():
        tiers[name] = _parse_tier(tiers_ctx.child(name))
    if "rank" not in tiers:
        raise ConfigurationError(
            "tiers: a 'rank' tier is required; it serves as the ranking stage"
        )
    if tiers["rank"].training.loss != "logloss":
        raise ConfigurationError(
            "tiers.rank.training.loss: the ranking model trains on clicks and "
            f"must use 'logloss', got {tiers['rank'].training.loss!r}"
        )

    if "evaluation" in raw:
        evaluation = _parse_evaluation(root.child("evaluation"))
    else:
        evaluation = EvalConfig(k_grid=(world.sizes.k,), c_grid=(world.sizes.c,))
    if max(evaluation.c_grid) > world.sizes.n:
        raise ConfigurationError(
            f"evaluation.c_grid max ({max(evaluation.c_grid)}) exceeds "
            f"world.sizes.n ({world.sizes.n})"
        )

    return ExperimentConfig(
        seed=seed,
        out_dir=out_dir,
        world=world,
        eval_requests=eval_requests,
        tiers=tiers,
        evaluation=evaluation,
        fixture=None,
    )


def load_config(
    path, *, seed_override: int | None = None, out_override: str | None = None
) -> ExperimentConfig:
    """Read and validate a JSON config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON: {exc}") from None
    return parse_experiment(obj, seed_override=seed_override, out_override=out_override)

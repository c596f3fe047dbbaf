"""Experiment harness: the engine behind the CLI verbs.

Each command is a pure function of (config, files already on disk): given the
same inputs it rewrites byte-identical outputs, and the manifest's content
digests make that checkable. Commands never reach back into earlier stages;
when an input file is missing they fail with the command that produces it.

Output layout under the configured directory::

    manifest.json                    seed + sha256 of every produced file
    world/                           corpus, ground truth, request streams
    checkpoints/<tier>.ckpt          trained predictors (+ <tier>_trace.csv)
    logs/<tag>/                      service/simulator/exposure JSONL + meta
    eval/<tag>/                      metric CSVs
    diagnosis/<tag>.csv              slot-substitution tables
    report/                          summary CSV + SVG plots
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cascade import (
    InitBidSource,
    ModelSource,
    OptBidSource,
    Pipeline,
    ScaledSource,
    ServiceRecord,
    SimulatorRecord,
    TableSource,
    consistent_pipeline,
    run_stream,
)
from .config import EvalConfig, ExperimentConfig, TierConfig
from .core import (
    ConfigurationError,
    DataError,
    Item,
    MissingPrerequisiteError,
    ProductFusion,
    Request,
    StageSizes,
    sort_order,
)
from .logio import (
    ExposureRow,
    exposure_from_obj,
    exposure_to_line,
    file_digest,
    item_from_obj,
    item_to_line,
    read_ground_truth,
    read_jsonl,
    request_from_obj,
    request_to_line,
    service_from_obj,
    service_to_line,
    simulator_from_obj,
    simulator_to_line,
    write_csv,
    write_ground_truth,
    write_jsonl,
)
from .metrics import (
    diagnose,
    ece,
    pcoc,
    auc,
    rcs_grid,
    score_histogram,
    single_objective_rcs_grid,
)
from .models import (
    GroupedDataset,
    PointwiseDataset,
    assign_chunks,
    init_predictor,
    load_checkpoint,
    ltr_target,
    mask_for_fraction,
    save_checkpoint,
    train,
)
from .synthworld import (
    World,
    collect_exposure_log,
    derived_rng,
    generate_world,
    make_requests,
    phi_dim,
    true_ctr_matrix,
)

__all__ = [
    "PipelinePlan",
    "Workspace",
    "parse_pipeline_spec",
    "standard_specs",
    "build_pipeline",
    "load_world",
    "load_requests",
    "cmd_generate",
    "cmd_train",
    "cmd_simulate",
    "cmd_evaluate",
    "cmd_diagnose",
    "summary_sizes",
    "update_manifest",
    "OBJECTIVE_CTR",
    "OBJECTIVE_BID",
    "CONSISTENT_SPEC",
    "COLLECT_SPEC",
]

# Click draws for ranking-model training run on their own stream so they never
# alias the exposure-log click stream.
_STREAM_ORACLE = 20

OBJECTIVE_CTR = "pctr"
OBJECTIVE_BID = "bid"
COLLECT_SPEC = "collect"
CONSISTENT_SPEC = "rank-as-prerank"

# Guard for calibration inputs: scores at or above 1 land in the top bucket.
_BELOW_ONE = float(np.nextafter(1.0, 0.0))


class Workspace:
    """Path arithmetic for one experiment's output directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.root = Path(cfg.out_dir)

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def world_dir(self) -> Path:
        return self.root / "world"

    @property
    def corpus(self) -> Path:
        return self.world_dir / "corpus.jsonl"

    @property
    def ground_truth(self) -> Path:
        return self.world_dir / "ground_truth.json"

    @property
    def train_requests(self) -> Path:
        return self.world_dir / "requests_train.jsonl"

    @property
    def eval_requests(self) -> Path:
        return self.world_dir / "requests_eval.jsonl"

    def checkpoint(self, tier: str) -> Path:
        return self.root / "checkpoints" / f"{tier}.ckpt"

    def trace(self, tier: str) -> Path:
        return self.root / "checkpoints" / f"{tier}_trace.csv"

    def log_dir(self, tag: str) -> Path:
        return self.root / "logs" / tag

    def eval_dir(self, tag: str) -> Path:
        return self.root / "eval" / tag

    @property
    def diagnosis_dir(self) -> Path:
        return self.root / "diagnosis"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    def existing_log_tags(self) -> list[str]:
        logs = self.root / "logs"
        if not logs.is_dir():
            return []
        return sorted(p.name for p in logs.iterdir() if p.is_dir())


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingPrerequisiteError(
            f"missing {path}; produce it with `cascadesim {producer}`"
        )
    return path


def update_manifest(ws: Workspace, seed: int, paths: Iterable[Path]) -> Path:
    """Merge digests of newly written files into the manifest."""
    manifest = {"seed": seed, "files": {}}
    if ws.manifest.exists():
        with open(ws.manifest, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        manifest["seed"] = seed
    for path in paths:
        rel = path.relative_to(ws.root).as_posix()
        manifest["files"][rel] = file_digest(path)
    ws.manifest.parent.mkdir(parents=True, exist_ok=True)
    body = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    with open(ws.manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(body)
    return ws.manifest


# ---------------------------------------------------------------------------
# Pipeline specs


@dataclass(frozen=True)
class PipelinePlan:
    """A parsed --pipeline argument: what to build and which stream to run."""

    spec: str
    tag: str
    kind: str  # "collect" | "consistent" | "tier"
    tier: str | None
    factor: float
    share_rank_bid: bool
    stream: str  # "train" | "eval"


def _tag_for(spec: str) -> str:
    return spec.replace("*", "_x").replace("+", "_").replace("@", "_")


def parse_pipeline_spec(spec: str, cfg: ExperimentConfig) -> PipelinePlan:
    """Grammar: ``collect`` | ``rank-as-prerank`` | TIER [``*``FACTOR] [``+optbid``] [``@train``].

    ``collect`` runs the bootstrap pipeline over the training stream; all
    other specs run over the held-out evaluation stream unless suffixed with
    ``@train``, which replays the training stream instead (a relog pass, used
    to harvest competitive sets under a deployed pre-ranker). ``*FACTOR``
    wraps the pre-rank CTR slot in a global rescale; ``+optbid`` makes the
    pre-rank bid slot serve the optimized bid, so the bid slots agree across
    stages.
    """
    spec = spec.strip()
    stream = "eval"
    body = spec
    if body.endswith("@train"):
        stream = "train"
        body = body[: -len("@train")]
    if body == COLLECT_SPEC:
        if spec != COLLECT_SPEC:
            raise ConfigurationError(
                f"pipeline spec {spec!r}: collect already runs the training stream"
            )
        return PipelinePlan(spec, COLLECT_SPEC, "collect", None, 1.0, False, "train")
    if body == CONSISTENT_SPEC:
        return PipelinePlan(spec, _tag_for(spec), "consistent", None, 1.0, False, stream)
    share_rank_bid = False
    if body.endswith("+optbid"):
        share_rank_bid = True
        body = body[: -len("+optbid")]
    factor = 1.0
    if "*" in body:
        body, _, factor_text = body.partition("*")
        try:
            factor = float(factor_text)
        except ValueError:
            raise ConfigurationError(
                f"pipeline spec {spec!r}: scale factor {factor_text!r} is not a number"
            ) from None
        if not (np.isfinite(factor) and factor > 0):
            raise ConfigurationError(
                f"pipeline spec {spec!r}: scale factor must be positive"
            )
    if body == "rank":
        raise ConfigurationError(
            f"pipeline spec {spec!r}: 'rank' is the ranking stage; "
            f"use '{CONSISTENT_SPEC}' to serve it as the pre-ranker"
        )
    if body not in cfg.tiers:
        raise ConfigurationError(
            f"pipeline spec {spec!r} references tier {body!r}, which is not "
            f"defined; config defines {list(cfg.tiers)}"
        )
    return PipelinePlan(spec, _tag_for(spec), "tier", body, factor, share_rank_bid, stream)


def standard_specs(cfg: ExperimentConfig) -> list[str]:
    """The full roster: bootstrap, relog passes, consistency control, every tier."""
    relogs = []
    for tier_cfg in cfg.tiers.values():
        source = tier_cfg.train_from
        if source and source != COLLECT_SPEC and source not in relogs:
            relogs.append(source)
    tiers = [name for name in cfg.tiers if name != "rank"]
    return [COLLECT_SPEC, *relogs, CONSISTENT_SPEC, *tiers]


def _load_predictor(ws: Workspace, cfg: ExperimentConfig, tier: str):
    path = ws.checkpoint(tier)
    if not path.exists():
        raise MissingPrerequisiteError(
            f"missing checkpoint {path}; produce it with `cascadesim train --tier {tier}`"
        )
    predictor, _meta = load_checkpoint(path)
    return predictor


def build_pipeline(plan: PipelinePlan, cfg: ExperimentConfig, world: World, ws: Workspace) -> Pipeline:
    """Assemble the two-stage pipeline a plan describes from checkpoints."""
    fusion = ProductFusion(objectives=(OBJECTIVE_CTR, OBJECTIVE_BID))
    sizes = world.cfg.sizes
    rank_model = ModelSource(_load_predictor(ws, cfg, "rank"), "sigmoid")
    rank_stage = {OBJECTIVE_CTR: rank_model, OBJECTIVE_BID: OptBidSource(world.gt)}
    if plan.kind == "consistent":
        prerank = dict(rank_stage)
    elif plan.kind == "collect":
        # Bootstrap: no pre-rank models exist yet, so the ranking model serves
        # both stages while the bid slot still differs (init vs optimized),
        # giving the funnel its production shape.
        prerank = {OBJECTIVE_CTR: rank_model, OBJECTIVE_BID: InitBidSource()}
    else:
        tier_cfg = cfg.tier(plan.tier)
        ctr: object = ModelSource(_load_predictor(ws, cfg, plan.tier), tier_cfg.transform)
        if plan.factor != 1.0:
            ctr = ScaledSource(ctr, plan.factor)
        bid = OptBidSource(world.gt) if plan.share_rank_bid else InitBidSource()
        prerank = {OBJECTIVE_CTR: ctr, OBJECTIVE_BID: bid}
    return Pipeline(prerank=prerank, rank=rank_stage, fusion=fusion, sizes=sizes)


# ---------------------------------------------------------------------------
# World and request IO


def _need_world(cfg: ExperimentConfig) -> None:
    if cfg.world is None:
        raise ConfigurationError(
            "this command needs a world experiment config; fixture configs only "
            "support generate, evaluate, and report"
        )


def load_world(cfg: ExperimentConfig, ws: Workspace) -> World:
    _need_world(cfg)
    _require(ws.corpus, "generate")
    _require(ws.ground_truth, "generate")
    items = tuple(read_jsonl(ws.corpus, item_from_obj))
    gt, interaction = read_ground_truth(ws.ground_truth)
    if interaction != cfg.world.interaction:
        raise DataError(
            f"{ws.ground_truth} was generated with interaction {interaction!r} "
            f"but the config says {cfg.world.interaction!r}"
        )
    return World(cfg=cfg.world, items=items, gt=gt)


def load_requests(path: Path) -> list[Request]:
    _require(path, "generate")
    return list(read_jsonl(path, request_from_obj))


# ---------------------------------------------------------------------------
# generate


def _fixture_logs(cfg: ExperimentConfig) -> tuple[list[ServiceRecord], list[SimulatorRecord]]:
    """Serve the hand-set fixture through the real cascade code path."""
    fixture = cfg.fixture
    names = sorted(fixture.items[0].prerank)
    d = 1
    items = tuple(
        Item(item_id=it.item_id, features=np.zeros(d), init_bid=1.0)
        for it in fixture.items
    )
    from .synthworld import GroundTruth, WorldConfig

    sizes = StageSizes(n=len(items), c=fixture.c, k=fixture.k)
    wcfg = WorldConfig(
        d=d,
        d_u=1,
        corpus_size=len(items),
        requests_per_epoch=1,
        sizes=sizes,
        seed=cfg.seed,
    )
    dim = phi_dim(wcfg)
    gt = GroundTruth(w_ctr=np.zeros(dim), b_ctr=0.0, w_opt=np.zeros(dim))
    world = World(cfg=wcfg, items=items, gt=gt)
    request = Request(
        request_id=0,
        user_features=np.zeros(1),
        preranking_set=tuple(it.item_id for it in fixture.items),
    )
    pipeline = Pipeline(
        prerank={
            name: TableSource({it.item_id: it.prerank[name] for it in fixture.items})
            for name in names
        },
        rank={
            name: TableSource({it.item_id: it.rank[name] for it in fixture.items})
            for name in names
        },
        fusion=ProductFusion(objectives=tuple(names)),
        sizes=sizes,
    )
    return run_stream([request], pipeline, world)


def cmd_generate(cfg: ExperimentConfig) -> list[Path]:
    """Write the world files (or fixture logs) plus the digest manifest."""
    ws = Workspace(cfg)
    written: list[Path] = []
    if cfg.fixture is not None:
        log_dir = ws.log_dir("fixture")
        log_dir.mkdir(parents=True, exist_ok=True)
        service, sim = _fixture_logs(cfg)
        write_jsonl(log_dir / "service.jsonl", (service_to_line(r) for r in service))
        write_jsonl(log_dir / "simulator.jsonl", (simulator_to_line(r) for r in sim))
        meta = {
            "factor": 1.0,
            "requests": 1,
            "spec": "fixture",
            "stream": "fixture",
            "tag": "fixture",
            "tier": None,
        }
        _write_json(log_dir / "meta.json", meta)
        written += [log_dir / "service.jsonl", log_dir / "simulator.jsonl", log_dir / "meta.json"]
    else:
        ws.world_dir.mkdir(parents=True, exist_ok=True)
        world = generate_world(cfg.world)
        write_jsonl(ws.corpus, (item_to_line(it) for it in world.items))
        write_ground_truth(ws.ground_truth, world.gt, cfg.world.interaction)
        train_reqs = make_requests(cfg.world, world.items, cfg.world.requests_per_epoch)
        eval_reqs = make_requests(cfg.world, world.items, cfg.eval_requests, eval_stream=True)
        write_jsonl(ws.train_requests, (request_to_line(r) for r in train_reqs))
        write_jsonl(ws.eval_requests, (request_to_line(r) for r in eval_reqs))
        written += [ws.corpus, ws.ground_truth, ws.train_requests, ws.eval_requests]
    update_manifest(ws, cfg.seed, written)
    return written


def _write_json(path: Path, obj: dict) -> None:
    body = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(body)


# ---------------------------------------------------------------------------
# train


def _tier_seed(global_seed: int, tier: str, training_seed: int) -> int:
    """Deterministic per-tier seed so tiers never share init/shuffle streams."""
    return (training_seed * 1_000_003 + global_seed) ^ zlib.crc32(tier.encode("utf-8"))


def _oracle_dataset(world: World, requests: Sequence[Request], tier_cfg: TierConfig) -> PointwiseDataset:
    """Uniformly subsampled pre-ranking items with true Bernoulli clicks.

    This is the ranking model's training table: unlike the exposure log, its
    support is the whole pre-ranking set, which is exactly the advantage the
    ranking stage has over the pre-rankers.
    """
    feats, labels = [], []
    for req in requests:
        phi = world.request_phi(req)
        rng = derived_rng(world.cfg.seed, _STREAM_ORACLE, req.request_id)
        m = min(tier_cfg.samples_per_request, phi.shape[0])
        rows = np.sort(rng.choice(phi.shape[0], size=m, replace=False))
        ps = true_ctr_matrix(world.gt, phi[rows])
        clicks = (rng.random(m) < ps).astype(np.float64)
        feats.append(phi[rows])
        labels.append(clicks)
    return PointwiseDataset(np.vstack(feats), np.concatenate(labels))


def _phi_for_rows(
    world: World,
    requests_by_id: Mapping[int, Request],
    rows: Sequence[tuple[int, int]],
) -> np.ndarray:
    """phi for (request_id, item_id) pairs, batched per request."""
    phi_cache: dict[int, tuple[dict[int, int], np.ndarray]] = {}
    out = np.empty((len(rows), phi_dim(world.cfg)), dtype=np.float64)
    for i, (request_id, item_id) in enumerate(rows):
        if request_id not in phi_cache:
            try:
                req = requests_by_id[request_id]
            except KeyError:
                raise DataError(
                    f"log row references request_id {request_id}, which is not "
                    f"in the request stream"
                ) from None
            row_of = {iid: j for j, iid in enumerate(req.preranking_set)}
            phi_cache[request_id] = (row_of, world.request_phi(req))
        row_of, phi = phi_cache[request_id]
        try:
            out[i] = phi[row_of[item_id]]
        except KeyError:
            raise DataError(
                f"log row references item_id {item_id}, which is not in "
                f"request {request_id}'s pre-ranking set"
            ) from None
    return out


def _exposure_dataset(
    world: World, requests_by_id: Mapping[int, Request], rows: Sequence[ExposureRow]
) -> PointwiseDataset:
    phi = _phi_for_rows(world, requests_by_id, [(r.request_id, r.item_id) for r in rows])
    labels = np.array([float(r.click) for r in rows], dtype=np.float64)
    return PointwiseDataset(phi, labels)


def _competitive_rows(
    service: Sequence[ServiceRecord], sim: Sequence[SimulatorRecord], c: int
) -> dict[int, list[tuple[ServiceRecord, SimulatorRecord]]]:
    """Per-request competitive set joined with the simulator's teacher row.

    Hash join on (request_id, item_id): the in-process form of the relational
    join an offline system would run between the two logs.
    """
    sim_by_key = {(r.request_id, r.item_id): r for r in sim}
    out: dict[int, list[tuple[ServiceRecord, SimulatorRecord]]] = {}
    for rec in service:
        if rec.pre_rank_pos > c:
            continue
        try:
            teacher = sim_by_key[(rec.request_id, rec.item_id)]
        except KeyError:
            raise DataError(
                f"service row (request {rec.request_id}, item {rec.item_id}) "
                f"has no simulator counterpart"
            ) from None
        out.setdefault(rec.request_id, []).append((rec, teacher))
    return out


def _teacher_logit(prob: np.ndarray) -> np.ndarray:
    return np.log(prob) - np.log1p(-prob)


def _distill_dataset(
    world: World,
    requests_by_id: Mapping[int, Request],
    service: Sequence[ServiceRecord],
    sim: Sequence[SimulatorRecord],
    c: int,
) -> PointwiseDataset:
    pairs = []
    targets = []
    joined = _competitive_rows(service, sim, c)
    for request_id in sorted(joined):
        for rec, teacher in joined[request_id]:
            pairs.append((rec.request_id, rec.item_id))
            targets.append(teacher.scores[OBJECTIVE_CTR])
    phi = _phi_for_rows(world, requests_by_id, pairs)
    return PointwiseDataset(phi, _teacher_logit(np.asarray(targets, dtype=np.float64)))


def _ltr_dataset(
    world: World,
    requests_by_id: Mapping[int, Request],
    service: Sequence[ServiceRecord],
    sim: Sequence[SimulatorRecord],
    c: int,
    chunks: int,
    boundary: int | None,
) -> GroupedDataset:
    """Chunk-labeled competitive sets ordered by the serving-equivalent target."""
    groups = []
    joined = _competitive_rows(service, sim, c)
    for request_id in sorted(joined):
        rows = joined[request_id]
        item_ids = np.array([rec.item_id for rec, _ in rows], dtype=np.int64)
        targets = np.array(
            [
                ltr_target(
                    rank_prob=teacher.scores[OBJECTIVE_CTR],
                    opt_bid=teacher.scores[OBJECTIVE_BID],
                    init_bid=rec.scores[OBJECTIVE_BID],
                )
                for rec, teacher in rows
            ],
            dtype=np.float64,
        )
        order = sort_order(item_ids, targets)
        phi = _phi_for_rows(
            world, requests_by_id, [(request_id, int(item_ids[i])) for i in order]
        )
        labels = assign_chunks(len(rows), chunks, boundary if chunks == 2 else None)
        groups.append((phi, labels.astype(np.float64)))
    return GroupedDataset(tuple(groups))


def cmd_train(cfg: ExperimentConfig, tier_name: str) -> list[Path]:
    """Train one tier and write its checkpoint plus the loss trace."""
    _need_world(cfg)
    tier_cfg = cfg.tier(tier_name)
    ws = Workspace(cfg)
    world = load_world(cfg, ws)
    dim = phi_dim(cfg.world)
    mask = mask_for_fraction(dim, tier_cfg.mask_fraction, seed=cfg.seed)
    seed = _tier_seed(cfg.seed, tier_name, tier_cfg.training.seed)
    predictor = init_predictor(dim, tier_cfg.hidden_dims, mask, seed=seed)
    train_cfg = replace(tier_cfg.training, seed=seed)
    loss = train_cfg.loss
    boundary: int | None = None

    if tier_name == "rank":
        if tier_cfg.train_from is not None:
            raise ConfigurationError(
                f"tiers.{tier_name}.train_from: the rank tier trains on its own "
                "sampled click stream, not on serving logs"
            )
        requests = load_requests(ws.train_requests)
        dataset = _oracle_dataset(world, requests, tier_cfg)
    else:
        source = parse_pipeline_spec(tier_cfg.train_from or COLLECT_SPEC, cfg)
        if source.stream != "train":
            raise ConfigurationError(
                f"tiers.{tier_name}.train_from must name a training-stream "
                f"pipeline ('{COLLECT_SPEC}' or 'TIER@train'), got {source.spec!r}"
            )
        if source.tier == tier_name:
            raise ConfigurationError(
                f"tiers.{tier_name}.train_from: a tier cannot train from its own "
                "serving logs"
            )
        source_dir = ws.log_dir(source.tag)
        hint = f"simulate --pipeline {source.spec}"
        requests = load_requests(ws.train_requests)
        requests_by_id = {r.request_id: r for r in requests}
        if loss == "logloss":
            rows = list(
                read_jsonl(_require(source_dir / "exposure.jsonl", hint), exposure_from_obj)
            )
            dataset = _exposure_dataset(world, requests_by_id, rows)
        else:
            service = list(
                read_jsonl(_require(source_dir / "service.jsonl", hint), service_from_obj)
            )
            sim = list(
                read_jsonl(_require(source_dir / "simulator.jsonl", hint), simulator_from_obj)
            )
            c = cfg.world.sizes.c
            if loss == "distill":
                dataset = _distill_dataset(world, requests_by_id, service, sim, c)
            else:
                boundary = cfg.world.sizes.k if train_cfg.chunks == 2 else None
                dataset = _ltr_dataset(
                    world, requests_by_id, service, sim, c, train_cfg.chunks, boundary
                )

    trained, trace = train(predictor, dataset, train_cfg)
    sample_count = (
        int(dataset.features.shape[0])
        if isinstance(dataset, PointwiseDataset)
        else int(sum(g[0].shape[0] for g in dataset.groups))
    )
    metadata = {
        "tier": tier_name,
        "loss": loss,
        "transform": tier_cfg.transform,
        "mask_fraction": tier_cfg.mask_fraction,
        "hidden_dims": list(tier_cfg.hidden_dims),
        "chunks": train_cfg.chunks,
        "boundary": boundary,
        "seed": seed,
        "samples": sample_count,
        "train_from": None if tier_name == "rank" else (tier_cfg.train_from or COLLECT_SPEC),
        "final_loss": trace[-1],
    }
    ws.checkpoint(tier_name).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ws.checkpoint(tier_name), trained, metadata)
    write_csv(
        ws.trace(tier_name),
        ["epoch", "loss"],
        [[i, float(v)] for i, v in enumerate(trace)],
    )
    written = [ws.checkpoint(tier_name), ws.trace(tier_name)]
    update_manifest(ws, cfg.seed, written)
    return written


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: ExperimentConfig, spec: str | None = None) -> list[Path]:
    """Run pipelines over their request streams and write all three logs."""
    _need_world(cfg)
    ws = Workspace(cfg)
    world = load_world(cfg, ws)
    specs = standard_specs(cfg) if spec in (None, "all") else [spec]
    written: list[Path] = []
    streams: dict[str, list[Request]] = {}
    for s in specs:
        plan = parse_pipeline_spec(s, cfg)
        pipeline = build_pipeline(plan, cfg, world, ws)
        if plan.stream not in streams:
            path = ws.train_requests if plan.stream == "train" else ws.eval_requests
            streams[plan.stream] = load_requests(path)
        requests = streams[plan.stream]
        service, sim = run_stream(requests, pipeline, world)
        exposure = collect_exposure_log(pipeline, requests, world)
        log_dir = ws.log_dir(plan.tag)
        log_dir.mkdir(parents=True, exist_ok=True)
        write_jsonl(log_dir / "service.jsonl", (service_to_line(r) for r in service))
        write_jsonl(log_dir / "simulator.jsonl", (simulator_to_line(r) for r in sim))
        write_jsonl(
            log_dir / "exposure.jsonl",
            (
                exposure_to_line(ExposureRow(r.request_id, r.item_id, r.click))
                for r in exposure
            ),
        )
        meta = {
            "factor": plan.factor,
            "requests": len(requests),
            "spec": plan.spec,
            "stream": plan.stream,
            "tag": plan.tag,
            "tier": plan.tier,
        }
        _write_json(log_dir / "meta.json", meta)
        written += [
            log_dir / "service.jsonl",
            log_dir / "simulator.jsonl",
            log_dir / "exposure.jsonl",
            log_dir / "meta.json",
        ]
    update_manifest(ws, cfg.seed, written)
    return written


# ---------------------------------------------------------------------------
# evaluate


def _read_logs(
    ws: Workspace, tag: str
) -> tuple[list[ServiceRecord], list[SimulatorRecord], list[ExposureRow] | None]:
    log_dir = ws.log_dir(tag)
    hint = "simulate" if tag != "fixture" else "generate"
    service = list(read_jsonl(_require(log_dir / "service.jsonl", hint), service_from_obj))
    sim = list(read_jsonl(_require(log_dir / "simulator.jsonl", hint), simulator_from_obj))
    exposure = None
    if (log_dir / "exposure.jsonl").exists():
        exposure = list(read_jsonl(log_dir / "exposure.jsonl", exposure_from_obj))
    return service, sim, exposure


def summary_sizes(cfg: ExperimentConfig) -> tuple[int, int]:
    if cfg.fixture is not None:
        return cfg.fixture.k, cfg.fixture.c
    return cfg.world.sizes.k, cfg.world.sizes.c


def _win_set_keys(
    service: Sequence[ServiceRecord], sim: Sequence[SimulatorRecord], k: int, c: int
) -> set[tuple[int, int]]:
    """(request_id, item_id) keys of each request's served win set."""
    sim_g = {(r.request_id, r.item_id): r.g_score for r in sim}
    by_request: dict[int, list[ServiceRecord]] = {}
    for rec in service:
        by_request.setdefault(rec.request_id, []).append(rec)
    keys: set[tuple[int, int]] = set()
    for request_id, rows in by_request.items():
        ids = np.array([r.item_id for r in rows], dtype=np.int64)
        pre_fused = np.array([r.g_score for r in rows], dtype=np.float64)
        competitive = ids[sort_order(ids, pre_fused)[:c]]
        try:
            rank_fused = np.array(
                [sim_g[(request_id, int(i))] for i in competitive], dtype=np.float64
            )
        except KeyError as exc:
            raise DataError(
                f"request {request_id}: item {exc.args[0]} has no simulator row"
            ) from None
        for i in sort_order(competitive, rank_fused)[:k]:
            keys.add((request_id, int(competitive[i])))
    return keys


def _calibration_pairs(
    service: Sequence[ServiceRecord],
    sim: Sequence[SimulatorRecord],
    keys: set[tuple[int, int]] | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Joined (pre-rank pctr, rank pctr) over a surface, clamped below 1."""
    sim_p = {(r.request_id, r.item_id): r.scores[OBJECTIVE_CTR] for r in sim}
    pred, ref = [], []
    for rec in service:
        key = (rec.request_id, rec.item_id)
        if keys is not None and key not in keys:
            continue
        try:
            ref.append(sim_p[key])
        except KeyError:
            raise DataError(
                f"service row (request {key[0]}, item {key[1]}) has no simulator row"
            ) from None
        pred.append(rec.scores[OBJECTIVE_CTR])
    pred_arr = np.clip(np.asarray(pred, dtype=np.float64), 0.0, _BELOW_ONE)
    ref_arr = np.clip(np.asarray(ref, dtype=np.float64), 0.0, _BELOW_ONE)
    return pred_arr, ref_arr


def cmd_evaluate(
    cfg: ExperimentConfig,
    spec: str | None = None,
    k_grid: Sequence[int] | None = None,
    c_grid: Sequence[int] | None = None,
) -> list[Path]:
    """Metric CSVs for one log tag or every tag under logs/."""
    ws = Workspace(cfg)
    evaluation = cfg.evaluation
    if k_grid or c_grid:
        evaluation = EvalConfig(
            k_grid=tuple(k_grid) if k_grid else evaluation.k_grid,
            c_grid=tuple(c_grid) if c_grid else evaluation.c_grid,
            mode=evaluation.mode,
            ece_buckets=evaluation.ece_buckets,
        )
    if spec is not None:
        tags = [parse_pipeline_spec(spec, cfg).tag if cfg.fixture is None else spec]
    else:
        tags = ws.existing_log_tags()
        if not tags:
            raise MissingPrerequisiteError(
                f"no logs under {ws.root / 'logs'}; produce them with `cascadesim simulate`"
            )
    k_star, c_star = summary_sizes(cfg)
    written: list[Path] = []
    for tag in tags:
        service, sim, exposure = _read_logs(ws, tag)
        out_dir = ws.eval_dir(tag)
        out_dir.mkdir(parents=True, exist_ok=True)

        pairs = evaluation.pairs()
        reports = rcs_grid(service, sim, pairs, mode=evaluation.mode)
        grid_rows = [
            [k, c, r.rcs_macro, r.rcs_micro, r.request_count]
            for (k, c), r in ((p, reports[p]) for p in pairs)
        ]
        write_csv(
            out_dir / "rcs_grid.csv", ["k", "c", "macro", "micro", "requests"], grid_rows
        )
        written.append(out_dir / "rcs_grid.csv")

        objectives = sorted(service[0].scores) if service else []
        single_rows = []
        for objective in objectives:
            by_pair = single_objective_rcs_grid(
                service, sim, objective, pairs, mode=evaluation.mode
            )
            for k, c in pairs:
                report = by_pair[(k, c)]
                single_rows.append(
                    [objective, k, c, report.rcs_macro, report.rcs_micro]
                )
        write_csv(
            out_dir / "single_objective.csv",
            ["objective", "k", "c", "macro", "micro"],
            single_rows,
        )
        written.append(out_dir / "single_objective.csv")

        if OBJECTIVE_CTR in objectives:
            win_keys = _win_set_keys(service, sim, k_star, c_star)
            surfaces = [("preranking_set", None), ("win_set", win_keys)]
            calib_rows = []
            for surface, keys in surfaces:
                pred, ref = _calibration_pairs(service, sim, keys)
                calib_rows.append(
                    [
                        surface,
                        ece(pred, ref, evaluation.ece_buckets),
                        pcoc(pred, ref),
                        int(pred.size),
                    ]
                )
            write_csv(
                out_dir / "calibration.csv",
                ["surface", "ece", "pcoc", "count"],
                calib_rows,
            )
            written.append(out_dir / "calibration.csv")

            edges = np.linspace(0.0, 1.0, evaluation.ece_buckets + 1)
            for surface, keys in surfaces:
                pred, ref = _calibration_pairs(service, sim, keys)
                pre_hist = score_histogram(pred, evaluation.ece_buckets)
                rank_hist = score_histogram(ref, evaluation.ece_buckets)
                rows = [
                    [float(edges[i]), float(edges[i + 1]), float(pre_hist[i]), float(rank_hist[i])]
                    for i in range(evaluation.ece_buckets)
                ]
                path = out_dir / f"hist_{surface}.csv"
                write_csv(path, ["bucket_lo", "bucket_hi", "prerank", "rank"], rows)
                written.append(path)

            if exposure is not None:
                pred_by_key = {
                    (r.request_id, r.item_id): r.scores[OBJECTIVE_CTR] for r in service
                }
                labels, scores = [], []
                for row in exposure:
                    key = (row.request_id, row.item_id)
                    try:
                        scores.append(pred_by_key[key])
                    except KeyError:
                        raise DataError(
                            f"exposure row (request {key[0]}, item {key[1]}) has no "
                            f"service row"
                        ) from None
                    labels.append(row.click)
                positives = int(sum(labels))
                write_csv(
                    out_dir / "auc.csv",
                    ["auc", "positives", "negatives"],
                    [[auc(labels, scores), positives, len(labels) - positives]],
                )
                written.append(out_dir / "auc.csv")
    update_manifest(ws, cfg.seed, written)
    return written


# ---------------------------------------------------------------------------
# diagnose


def default_diagnose_spec(cfg: ExperimentConfig) -> str:
    for name in cfg.tiers:
        if name != "rank":
            return name
    raise ConfigurationError(
        "diagnose needs at least one pre-rank tier in the config"
    )


def cmd_diagnose(cfg: ExperimentConfig, spec: str | None = None) -> list[Path]:
    """Slot-substitution table for one pipeline over the evaluation stream."""
    _need_world(cfg)
    ws = Workspace(cfg)
    world = load_world(cfg, ws)
    if spec is None:
        spec = default_diagnose_spec(cfg)
    plan = parse_pipeline_spec(spec, cfg)
    if plan.kind != "tier":
        raise ConfigurationError(
            f"diagnose needs a tier pipeline; {spec!r} has no slots to substitute"
        )
    pipeline = build_pipeline(plan, cfg, world, ws)
    requests = load_requests(ws.eval_requests)
    table = diagnose(pipeline, world, requests, mode=cfg.evaluation.mode)
    ws.diagnosis_dir.mkdir(parents=True, exist_ok=True)
    path = ws.diagnosis_dir / f"{plan.tag}.csv"
    write_csv(
        path,
        ["slot", "rcs_before", "rcs_after", "delta"],
        [[row.slot, row.rcs_before, row.rcs_after, row.delta] for row in table.rows],
    )
    update_manifest(ws, cfg.seed, [path])
    return [path]

"""Consistency and calibration metrics over the two log families.

The consistency score joins the service log (pre-rank scores) with the
simulator log (rank scores over the same items) per request: the ideal win
set is the rank models' top k, the competitive set is the pre-rank top c, and
the score is the surviving fraction. Two aggregations are reported side by
side: the per-request mean (macro) and the pooled ratio (micro). They agree
whenever every request contributes exactly k ideal winners and diverge when
ideal-win-set sizes vary, so both are always computed rather than silently
picking one.

Calibration is measured against the ranking stage's own predictions, not
click labels: labels only exist for exposed items, while the consistency
problem lives mostly on unexposed ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cascade import (
    Pipeline,
    ServiceRecord,
    SimulatorRecord,
    consistent_pipeline,
    run_request,
    run_stream,
    substitute,
)
from .core import ConfigurationError, DataError, Request, sort_order
from .synthworld import World

__all__ = [
    "RcsReport",
    "BucketRow",
    "CalibrationReport",
    "DiagnosisRow",
    "DiagnosisTable",
    "rcs",
    "rcs_grid",
    "single_objective_rcs_grid",
    "single_objective_rcs",
    "ece",
    "pcoc",
    "calibration_report",
    "auc",
    "score_histogram",
    "diagnose",
]

RCS_MODES = ("macro", "micro")
DEFAULT_BUCKETS = 50


@dataclass(frozen=True)
class RcsReport:
    mode: str
    k: int
    c: int
    request_count: int
    per_request: Mapping[int, float]
    rcs_macro: float
    rcs_micro: float

    @property
    def value(self) -> float:
        return self.rcs_macro if self.mode == "macro" else self.rcs_micro


@dataclass(frozen=True)
class BucketRow:
    index: int
    lo: float
    hi: float
    count: int
    mean_pred: float
    mean_ref: float


@dataclass(frozen=True)
class CalibrationReport:
    ece: float
    pcoc: float
    buckets: tuple[BucketRow, ...]
    count: int


@dataclass(frozen=True)
class DiagnosisRow:
    slot: str
    rcs_before: float
    rcs_after: float
    delta: float


@dataclass(frozen=True)
class DiagnosisTable:
    mode: str
    k: int
    c: int
    request_count: int
    rows: tuple[DiagnosisRow, ...]


def _group(
    records: Iterable, label: str
) -> dict[int, tuple[np.ndarray, np.ndarray, list]]:
    """Group log rows by request: (item_ids, g_scores, records), duplicates rejected."""
    by_request: dict[int, list] = {}
    for rec in records:
        by_request.setdefault(rec.request_id, []).append(rec)
    out = {}
    for rid, rows in by_request.items():
        ids = np.array([r.item_id for r in rows], dtype=np.int64)
        if len(set(ids.tolist())) != len(ids):
            raise DataError(f"{label} log repeats an item within request {rid}")
        fused = np.array([r.g_score for r in rows], dtype=np.float64)
        out[rid] = (ids, fused, rows)
    return out


def _check_same_requests(service: dict, sim: dict) -> None:
    missing_in_sim = sorted(set(service) - set(sim))
    missing_in_service = sorted(set(sim) - set(service))
    if missing_in_sim or missing_in_service:
        raise DataError(
            "logs cover different requests: "
            f"only in service log {missing_in_sim[:10]}, only in simulator log {missing_in_service[:10]}"
        )
    if not service:
        raise DataError("logs are empty")


def _check_pair(k: int, c: int, mode: str) -> None:
    if mode not in RCS_MODES:
        raise ConfigurationError(f"unknown mode {mode!r}, expected one of {RCS_MODES}")
    if not (1 <= k <= c):
        raise ConfigurationError(f"need 1 <= k <= c, got k={k}, c={c}")


def _ordered_ids(groups: dict, label: str) -> dict[int, list[int]]:
    """Item ids per request, best fused score first; each request sorted once."""
    out = {}
    for rid, (ids, fused, _) in groups.items():
        if ids.size == 0:
            raise DataError(f"request {rid} has an empty ideal win set")
        out[rid] = ids[sort_order(ids, fused)].tolist()
    return out


def _rcs_from_ordered(
    service: dict[int, list[int]], sim: dict[int, list[int]], k: int, c: int, mode: str
) -> RcsReport:
    per_request: dict[int, float] = {}
    hits = 0
    ideal_total = 0
    for rid in sorted(service):
        ideal = set(sim[rid][:k])
        competitive = set(service[rid][:c])
        inter = len(ideal & competitive)
        per_request[rid] = inter / len(ideal)
        hits += inter
        ideal_total += len(ideal)
    macro = float(np.mean(list(per_request.values())))
    micro = hits / ideal_total
    return RcsReport(
        mode=mode,
        k=k,
        c=c,
        request_count=len(per_request),
        per_request=per_request,
        rcs_macro=macro,
        rcs_micro=micro,
    )


def rcs_grid(
    service: Iterable[ServiceRecord],
    sim: Iterable[SimulatorRecord],
    pairs: Sequence[tuple[int, int]],
    mode: str = "macro",
) -> dict[tuple[int, int], RcsReport]:
    """RCS at several (k, c) grid points over one grouping pass of the logs."""
    for k, c in pairs:
        _check_pair(k, c, mode)
    service_o = _ordered_ids(_group(service, "service"), "service")
    sim_o = _ordered_ids(_group(sim, "simulator"), "simulator")
    _check_same_requests(service_o, sim_o)
    return {(k, c): _rcs_from_ordered(service_o, sim_o, k, c, mode) for k, c in pairs}


def rcs(
    service: Iterable[ServiceRecord],
    sim: Iterable[SimulatorRecord],
    k: int,
    c: int,
    mode: str = "macro",
) -> RcsReport:
    """Consistency of the pre-rank funnel against the rank models' ideal top k.

    The ideal win set is the simulator log's top k by fused rank score; the
    competitive set is the service log's top c by fused pre-rank score. Ties
    break by ascending item_id on both sides.
    """
    return rcs_grid(service, sim, [(k, c)], mode)[(k, c)]


def _regroup_objective(groups: dict, objective: str, label: str) -> dict:
    out = {}
    for rid, (ids, _, rows) in groups.items():
        try:
            raw = np.array([r.scores[objective] for r in rows], dtype=np.float64)
        except KeyError:
            raise ConfigurationError(
                f"objective {objective!r} missing from {label} log in request {rid}"
            ) from None
        out[rid] = (ids, raw, rows)
    return out


def single_objective_rcs_grid(
    service: Iterable[ServiceRecord],
    sim: Iterable[SimulatorRecord],
    objective: str,
    pairs: Sequence[tuple[int, int]],
    mode: str = "macro",
) -> dict[tuple[int, int], RcsReport]:
    """Single-objective RCS at several (k, c) points, grouping the logs once."""
    for k, c in pairs:
        _check_pair(k, c, mode)
    service_o = _ordered_ids(
        _regroup_objective(_group(service, "service"), objective, "service"), "service"
    )
    sim_o = _ordered_ids(
        _regroup_objective(_group(sim, "simulator"), objective, "simulator"), "simulator"
    )
    _check_same_requests(service_o, sim_o)
    return {(k, c): _rcs_from_ordered(service_o, sim_o, k, c, mode) for k, c in pairs}


def single_objective_rcs(
    service: Iterable[ServiceRecord],
    sim: Iterable[SimulatorRecord],
    objective: str,
    k: int,
    c: int,
    mode: str = "macro",
) -> RcsReport:
    """RCS with fusion replaced by one objective's raw score on both sides.

    Isolates which objective's model pair drives an inconsistency: fused RCS
    can be low while each single-objective RCS is high, and vice versa.
    """
    return single_objective_rcs_grid(service, sim, objective, [(k, c)], mode)[(k, c)]


def _validate_unit_interval(values: np.ndarray, label: str) -> None:
    if values.size and (np.min(values) < 0.0 or np.max(values) >= 1.0):
        raise DataError(f"{label} values must lie in [0, 1)")


def ece(
    pred: Sequence[float] | np.ndarray,
    ref: Sequence[float] | np.ndarray,
    buckets: int = DEFAULT_BUCKETS,
) -> float:
    """Expected calibration error of pre-rank probabilities against rank ones.

    Samples are bucketed by the pre-rank probability into ``buckets`` equal
    slices of [0, 1); each bucket contributes the absolute value of its signed
    error sum, so within-bucket over- and under-prediction cancel.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape or pred.ndim != 1:
        raise DataError("pred and ref must be matching 1-D arrays")
    if pred.size == 0:
        raise DataError("ece needs at least one sample")
    if buckets < 1:
        raise ConfigurationError("buckets must be >= 1")
    _validate_unit_interval(pred, "pred")
    _validate_unit_interval(ref, "ref")
    idx = np.floor(pred * buckets).astype(np.int64)
    signed = np.bincount(idx, weights=ref - pred, minlength=buckets)
    return float(np.sum(np.abs(signed)) / pred.size)


def pcoc(pred: Sequence[float] | np.ndarray, ref: Sequence[float] | np.ndarray) -> float:
    """Sum of predicted probabilities over sum of reference probabilities."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape or pred.ndim != 1 or pred.size == 0:
        raise DataError("pred and ref must be matching nonempty 1-D arrays")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(ref))):
        raise DataError("pcoc inputs must be finite")
    denom = float(np.sum(ref))
    if denom <= 0.0:
        raise DataError("reference probabilities sum to zero")
    return float(np.sum(pred)) / denom


def calibration_report(
    pred: Sequence[float] | np.ndarray,
    ref: Sequence[float] | np.ndarray,
    buckets: int = DEFAULT_BUCKETS,
) -> CalibrationReport:
    """ECE, PCOC, and the per-bucket table behind them, bucketed by pred."""
    value = ece(pred, ref, buckets)
    ratio = pcoc(pred, ref)
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    idx = np.floor(pred * buckets).astype(np.int64)
    counts = np.bincount(idx, minlength=buckets)
    sum_pred = np.bincount(idx, weights=pred, minlength=buckets)
    sum_ref = np.bincount(idx, weights=ref, minlength=buckets)
    rows = []
    for b in range(buckets):
        n = int(counts[b])
        rows.append(
            BucketRow(
                index=b,
                lo=b / buckets,
                hi=(b + 1) / buckets,
                count=n,
                mean_pred=float(sum_pred[b] / n) if n else 0.0,
                mean_ref=float(sum_ref[b] / n) if n else 0.0,
            )
        )
    return CalibrationReport(ece=value, pcoc=ratio, buckets=tuple(rows), count=int(pred.size))


def auc(labels: Sequence[int] | np.ndarray, scores: Sequence[float] | np.ndarray) -> float:
    """Probability a random positive outscores a random negative; ties count half.

    Rank-sum formulation with midranks, so exact under ties.
    """
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1 or labels.size == 0:
        raise DataError("labels and scores must be matching nonempty 1-D arrays")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise DataError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("auc needs at least one positive and one negative label")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    starts = np.cumsum(counts) - counts
    midranks = starts + (counts + 1) / 2.0  # 1-based average rank per distinct score
    ranks = midranks[inverse]
    pos_rank_sum = float(ranks[labels == 1.0].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def score_histogram(values: Sequence[float] | np.ndarray, buckets: int) -> np.ndarray:
    """Proportion of values per equal slice of [0, 1); empty input gives zeros."""
    if buckets < 1:
        raise ConfigurationError("buckets must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return np.zeros(buckets)
    _validate_unit_interval(values, "histogram")
    idx = np.floor(values * buckets).astype(np.int64)
    return np.bincount(idx, minlength=buckets) / values.size


def diagnose(
    pipeline: Pipeline,
    world: World,
    requests: Sequence[Request],
    mode: str = "macro",
) -> DiagnosisTable:
    """Substitution protocol: swap each prerank slot for its rank counterpart.

    One row per objective (RCS before, after, delta) plus a final row that
    substitutes every slot at once; the final row's RCS is 1 by construction,
    which doubles as an end-to-end sanity check of the whole metric path.
    Rows follow the pipeline's declaration order.
    """
    slots = list(pipeline.prerank)
    if len(slots) < 2:
        raise ConfigurationError(
            f"diagnosis needs at least 2 substitutable slots, pipeline has {len(slots)}"
        )
    service, sim = run_stream(requests, pipeline, world)
    k, c = pipeline.sizes.k, pipeline.sizes.c
    base = rcs(service, sim, k, c, mode)
    sim_o = _ordered_ids(_group(sim, "simulator"), "simulator")

    def rcs_with(candidate: Pipeline) -> float:
        records = []
        for req in requests:
            records.extend(run_request(req, candidate, world).records)
        service_o = _ordered_ids(_group(records, "service"), "service")
        _check_same_requests(service_o, sim_o)
        return _rcs_from_ordered(service_o, sim_o, k, c, mode).value

    rows = []
    for name in slots:
        swapped = substitute(pipeline, "prerank", name, pipeline.rank[name])
        after = rcs_with(swapped)
        rows.append(
            DiagnosisRow(slot=name, rcs_before=base.value, rcs_after=after, delta=after - base.value)
        )
    full = rcs_with(consistent_pipeline(pipeline))
    rows.append(
        DiagnosisRow(slot="all", rcs_before=base.value, rcs_after=full, delta=full - base.value)
    )
    return DiagnosisTable(
        mode=mode, k=k, c=c, request_count=base.request_count, rows=tuple(rows)
    )

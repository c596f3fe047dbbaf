"""Bit-exact JSONL log formats and CSV emission.

Every log is one JSON object per line, UTF-8, LF endings. Reals are rendered
with 17 significant digits, which round-trips IEEE doubles exactly, and keys
are written in a fixed order by a hand-rolled serializer, so parse followed
by re-serialize reproduces the file byte for byte. That property is what lets
the manifest digests double as regression oracles.

The metric join consumes these records keyed on (request_id, item_id) via an
in-memory hash join; it is the in-process equivalent of the SQL LEFT JOIN an
online system would run over the same two tables.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .cascade import ServiceRecord, SimulatorRecord
from .core import DataError, Item, Request
from .synthworld import GroundTruth

__all__ = [
    "fmt_float",
    "write_jsonl",
    "read_jsonl",
    "service_to_line",
    "service_from_obj",
    "simulator_to_line",
    "simulator_from_obj",
    "exposure_to_line",
    "exposure_from_obj",
    "item_to_line",
    "item_from_obj",
    "request_to_line",
    "request_from_obj",
    "write_ground_truth",
    "read_ground_truth",
    "write_csv",
    "file_digest",
    "ExposureRow",
]

SERVICE_KEYS = ("request_id", "item_id", "pv", "scores", "g_score", "pre_rank_pos")
SIMULATOR_KEYS = ("request_id", "item_id", "pv", "scores", "g_score", "rank_pos")
EXPOSURE_KEYS = ("request_id", "item_id", "pv", "click")


def fmt_float(x: float) -> str:
    """17-significant-digit rendering; exact double round-trip."""
    if not np.isfinite(x):
        raise DataError(f"cannot serialize non-finite value {x}")
    return format(float(x), ".17g")


def _scores_json(scores: Mapping[str, float]) -> str:
    parts = []
    for name in sorted(scores):
        parts.append(f"{json.dumps(name)}:{fmt_float(scores[name])}")
    return "{" + ",".join(parts) + "}"


def _floats_json(values: Iterable[float]) -> str:
    return "[" + ",".join(fmt_float(v) for v in values) + "]"


def service_to_line(rec: ServiceRecord) -> str:
    return (
        f'{{"request_id":{rec.request_id},"item_id":{rec.item_id},"pv":{rec.pv},'
        f'"scores":{_scores_json(rec.scores)},"g_score":{fmt_float(rec.g_score)},'
        f'"pre_rank_pos":{rec.pre_rank_pos}}}'
    )


def simulator_to_line(rec: SimulatorRecord) -> str:
    return (
        f'{{"request_id":{rec.request_id},"item_id":{rec.item_id},"pv":{rec.pv},'
        f'"scores":{_scores_json(rec.scores)},"g_score":{fmt_float(rec.g_score)},'
        f'"rank_pos":{rec.rank_pos}}}'
    )


def _check_keys(obj: dict, expected: tuple[str, ...], what: str) -> None:
    if tuple(obj.keys()) != expected:
        raise DataError(
            f"{what} record has keys {list(obj.keys())}, expected exactly {list(expected)}"
        )


def service_from_obj(obj: dict) -> ServiceRecord:
    _check_keys(obj, SERVICE_KEYS, "service")
    return ServiceRecord(
        request_id=int(obj["request_id"]),
        item_id=int(obj["item_id"]),
        scores={k: float(v) for k, v in obj["scores"].items()},
        g_score=float(obj["g_score"]),
        pre_rank_pos=int(obj["pre_rank_pos"]),
        pv=int(obj["pv"]),
    )


def simulator_from_obj(obj: dict) -> SimulatorRecord:
    _check_keys(obj, SIMULATOR_KEYS, "simulator")
    return SimulatorRecord(
        request_id=int(obj["request_id"]),
        item_id=int(obj["item_id"]),
        scores={k: float(v) for k, v in obj["scores"].items()},
        g_score=float(obj["g_score"]),
        rank_pos=int(obj["rank_pos"]),
        pv=int(obj["pv"]),
    )


class ExposureRow:
    """Lean exposed-item row as stored on disk: ids and the frozen click."""

    __slots__ = ("request_id", "item_id", "pv", "click")

    def __init__(self, request_id: int, item_id: int, click: int, pv: int = 1):
        self.request_id = request_id
        self.item_id = item_id
        self.pv = pv
        self.click = click

    def __eq__(self, other) -> bool:
        return isinstance(other, ExposureRow) and (
            (self.request_id, self.item_id, self.pv, self.click)
            == (other.request_id, other.item_id, other.pv, other.click)
        )

    def __repr__(self) -> str:
        return (
            f"ExposureRow(request_id={self.request_id}, item_id={self.item_id}, "
            f"click={self.click})"
        )


def exposure_to_line(row: ExposureRow) -> str:
    return (
        f'{{"request_id":{row.request_id},"item_id":{row.item_id},'
        f'"pv":{row.pv},"click":{row.click}}}'
    )


def exposure_from_obj(obj: dict) -> ExposureRow:
    _check_keys(obj, EXPOSURE_KEYS, "exposure")
    click = int(obj["click"])
    if click not in (0, 1):
        raise DataError(f"exposure click must be 0 or 1, got {click}")
    return ExposureRow(
        request_id=int(obj["request_id"]),
        item_id=int(obj["item_id"]),
        click=click,
        pv=int(obj["pv"]),
    )


def item_to_line(item: Item) -> str:
    return (
        f'{{"item_id":{item.item_id},"features":{_floats_json(item.features)},'
        f'"init_bid":{fmt_float(item.init_bid)}}}'
    )


def item_from_obj(obj: dict) -> Item:
    _check_keys(obj, ("item_id", "features", "init_bid"), "corpus")
    return Item(
        item_id=int(obj["item_id"]),
        features=np.array(obj["features"], dtype=np.float64),
        init_bid=float(obj["init_bid"]),
    )


def request_to_line(req: Request) -> str:
    ids = "[" + ",".join(str(i) for i in req.preranking_set) + "]"
    return (
        f'{{"request_id":{req.request_id},"user_features":{_floats_json(req.user_features)},'
        f'"preranking_set":{ids}}}'
    )


def request_from_obj(obj: dict) -> Request:
    _check_keys(obj, ("request_id", "user_features", "preranking_set"), "request")
    return Request(
        request_id=int(obj["request_id"]),
        user_features=np.array(obj["user_features"], dtype=np.float64),
        preranking_set=tuple(int(i) for i in obj["preranking_set"]),
    )


def write_jsonl(path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")


def read_jsonl(path, parse: Callable[[dict], object]) -> Iterator[object]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            try:
                yield parse(obj)
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None


def write_ground_truth(path, gt: GroundTruth, interaction: str) -> None:
    body = (
        f'{{"w_ctr":{_floats_json(gt.w_ctr)},"b_ctr":{fmt_float(gt.b_ctr)},'
        f'"w_opt":{_floats_json(gt.w_opt)},"interaction":{json.dumps(interaction)}}}'
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(body)
        fh.write("\n")


def read_ground_truth(path) -> tuple[GroundTruth, str]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    _check_keys(obj, ("w_ctr", "b_ctr", "w_opt", "interaction"), "ground-truth")
    gt = GroundTruth(
        w_ctr=np.array(obj["w_ctr"], dtype=np.float64),
        b_ctr=float(obj["b_ctr"]),
        w_opt=np.array(obj["w_opt"], dtype=np.float64),
    )
    return gt, str(obj["interaction"])


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """CSV with LF endings; floats use the shortest exact rendering."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [repr(float(v)) if isinstance(v, float) else v for v in row]
            )


def file_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()

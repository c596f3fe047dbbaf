"""Round-trip and format tests for the JSONL log layer."""

import json
import math

import numpy as np
import pytest

from cascadesim.cascade import ServiceRecord, SimulatorRecord
from cascadesim.core import DataError, Item, Request
from cascadesim.logio import (
    ExposureRow,
    exposure_from_obj,
    exposure_to_line,
    file_digest,
    fmt_float,
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
from cascadesim.synthworld import GroundTruth


class TestFmtFloat:
    def test_simple(self):
        assert fmt_float(0.5) == "0.5"
        assert fmt_float(1.0) == "1"
        assert fmt_float(-2.25) == "-2.25"

    def test_roundtrip_exact_random(self):
        rng = np.random.default_rng(7)
        values = np.concatenate(
            [
                rng.normal(size=200),
                rng.uniform(-1e9, 1e9, size=200),
                10.0 ** rng.uniform(-300, 300, size=200) * rng.choice([-1, 1], size=200),
            ]
        )
        for v in values:
            assert float(fmt_float(float(v))) == float(v)

    def test_seventeen_digit_example(self):
        # 0.1 is not dyadic; the rendering must carry enough digits to recover it.
        assert float(fmt_float(0.1)) == 0.1

    def test_nonfinite_rejected(self):
        for bad in (math.nan, math.inf, -math.inf):
            with pytest.raises(DataError, match="non-finite"):
                fmt_float(bad)


def sample_service() -> ServiceRecord:
    return ServiceRecord(
        request_id=12,
        item_id=3,
        scores={"pctr": 0.1, "bid": 8.0},
        g_score=0.8,
        pre_rank_pos=1,
    )


def sample_simulator() -> SimulatorRecord:
    return SimulatorRecord(
        request_id=12,
        item_id=3,
        scores={"pctr": 0.30000000000000004, "bid": 8.0},
        g_score=2.4000000000000004,
        rank_pos=2,
    )


class TestServiceLine:
    def test_key_order(self):
        line = service_to_line(sample_service())
        obj = json.loads(line)
        assert list(obj.keys()) == [
            "request_id",
            "item_id",
            "pv",
            "scores",
            "g_score",
            "pre_rank_pos",
        ]
        assert list(obj["scores"].keys()) == ["bid", "pctr"]

    def test_roundtrip_byte_identical(self):
        line = service_to_line(sample_service())
        rec = service_from_obj(json.loads(line))
        assert service_to_line(rec) == line
        assert rec == sample_service()

    def test_pv_default_one(self):
        assert '"pv":1' in service_to_line(sample_service())

    def test_wrong_keys_rejected(self):
        obj = json.loads(service_to_line(sample_service()))
        obj["extra"] = 1
        with pytest.raises(DataError, match="expected exactly"):
            service_from_obj(obj)
        obj2 = json.loads(service_to_line(sample_service()))
        del obj2["g_score"]
        with pytest.raises(DataError, match="expected exactly"):
            service_from_obj(obj2)


class TestSimulatorLine:
    def test_roundtrip_byte_identical(self):
        line = simulator_to_line(sample_simulator())
        rec = simulator_from_obj(json.loads(line))
        assert simulator_to_line(rec) == line

    def test_full_precision_scores(self):
        # 0.30000000000000004 differs from 0.3 in the last ulp; the line must
        # preserve the distinction.
        line = simulator_to_line(sample_simulator())
        rec = simulator_from_obj(json.loads(line))
        assert rec.scores["pctr"] == 0.30000000000000004
        assert rec.scores["pctr"] != 0.3

    def test_rank_pos_key(self):
        obj = json.loads(simulator_to_line(sample_simulator()))
        assert "rank_pos" in obj and "pre_rank_pos" not in obj


class TestExposureLine:
    def test_roundtrip(self):
        row = ExposureRow(request_id=5, item_id=9, click=1)
        line = exposure_to_line(row)
        assert line == '{"request_id":5,"item_id":9,"pv":1,"click":1}'
        assert exposure_from_obj(json.loads(line)) == row

    def test_bad_click_rejected(self):
        with pytest.raises(DataError, match="click"):
            exposure_from_obj(
                {"request_id": 1, "item_id": 2, "pv": 1, "click": 2}
            )


class TestItemAndRequestLines:
    def test_item_roundtrip(self):
        item = Item(item_id=4, features=np.array([0.25, -1.5, 0.1]), init_bid=2.5)
        line = item_to_line(item)
        back = item_from_obj(json.loads(line))
        assert back.item_id == item.item_id
        assert back.init_bid == item.init_bid
        assert np.array_equal(back.features, item.features)
        assert item_to_line(back) == line

    def test_request_roundtrip(self):
        req = Request(
            request_id=7,
            user_features=np.array([0.5, 0.1]),
            preranking_set=(3, 1, 2),
        )
        line = request_to_line(req)
        back = request_from_obj(json.loads(line))
        assert back.request_id == 7
        assert back.preranking_set == (3, 1, 2)
        assert np.array_equal(back.user_features, req.user_features)
        assert request_to_line(back) == line


class TestJsonlFiles:
    def test_write_read_roundtrip_bytes(self, tmp_path):
        rng = np.random.default_rng(3)
        recs = [
            ServiceRecord(
                request_id=r,
                item_id=i,
                scores={"pctr": float(rng.uniform(0, 1)), "bid": float(rng.uniform(0.5, 5))},
                g_score=float(rng.normal()) ** 2 + 1e-9,
                pre_rank_pos=i,
            )
            for r in range(3)
            for i in range(4)
        ]
        path = tmp_path / "service.jsonl"
        write_jsonl(path, (service_to_line(r) for r in recs))
        parsed = list(read_jsonl(path, service_from_obj))
        path2 = tmp_path / "service2.jsonl"
        write_jsonl(path2, (service_to_line(r) for r in parsed))
        assert path.read_bytes() == path2.read_bytes()
        assert path.read_bytes().endswith(b"\n")
        assert b"\r" not in path.read_bytes()

    def test_invalid_json_line_reports_position(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"request_id":1,"item_id":2,"pv":1,"click":0}\n{oops\n')
        with pytest.raises(DataError, match="2: invalid JSON"):
            list(read_jsonl(path, exposure_from_obj))

    def test_schema_error_reports_position(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"request_id":1,"click":0}\n')
        with pytest.raises(DataError, match="1: exposure record"):
            list(read_jsonl(path, exposure_from_obj))

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "gaps.jsonl"
        path.write_text('{"request_id":1,"item_id":2,"pv":1,"click":0}\n\n')
        assert len(list(read_jsonl(path, exposure_from_obj))) == 1


class TestGroundTruthFile:
    def test_roundtrip(self, tmp_path):
        gt = GroundTruth(
            w_ctr=np.array([0.5, -0.25, 0.1]),
            b_ctr=-1.5,
            w_opt=np.array([1.0, 0.0, -2.0]),
        )
        path = tmp_path / "ground_truth.json"
        write_ground_truth(path, gt, "concat_prod")
        back, interaction = read_ground_truth(path)
        assert interaction == "concat_prod"
        assert np.array_equal(back.w_ctr, gt.w_ctr)
        assert back.b_ctr == gt.b_ctr
        assert np.array_equal(back.w_opt, gt.w_opt)
        # Re-serialization is byte-identical.
        path2 = tmp_path / "gt2.json"
        write_ground_truth(path2, back, interaction)
        assert path.read_bytes() == path2.read_bytes()


class TestCsvAndDigest:
    def test_csv_float_rendering(self, tmp_path):
        path = tmp_path / "t.csv"
        write_csv(path, ["name", "value"], [["a", 0.1], ["b", 2]])
        text = path.read_text()
        assert text == "name,value\na,0.1\nb,2\n"

    def test_digest_changes_with_content(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        a.write_bytes(b"hello\n")
        b.write_bytes(b"hello!\n")
        assert file_digest(a) != file_digest(b)
        assert file_digest(a) == file_digest(a)
        assert len(file_digest(a)) == 64

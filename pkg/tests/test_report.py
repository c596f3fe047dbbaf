"""Report rendering: summary CSV assembly and deterministic SVG output."""

import pytest

from cascadesim.core import MissingPrerequisiteError
from cascadesim.config import load_config
from cascadesim.harness import Workspace
from cascadesim.report import (
    cmd_report,
    render_histogram_svg,
    render_summary_svg,
    render_trend_svg,
)


HIST_HEADER = "bucket_lo,bucket_hi,prerank,rank\n"


def test_empty_histogram_renders_axes_only(tmp_path):
    csv_path = tmp_path / "hist.csv"
    csv_path.write_text(HIST_HEADER)
    svg_path = render_histogram_svg(csv_path, tmp_path / "empty.svg", "empty")
    empty = svg_path.read_bytes()
    assert empty.startswith(b"<?xml")
    csv_path.write_text(HIST_HEADER + "0.0,0.5,0.25,0.75\n0.5,1.0,0.75,0.25\n")
    full = render_histogram_svg(csv_path, tmp_path / "full.svg", "empty").read_bytes()
    assert len(full) > len(empty)


def test_identical_csv_identical_svg(tmp_path):
    csv_path = tmp_path / "hist.csv"
    csv_path.write_text(HIST_HEADER + "0.0,0.5,0.5,0.5\n0.5,1.0,0.5,0.5\n")
    first = render_histogram_svg(csv_path, tmp_path / "a.svg", "t").read_bytes()
    second = render_histogram_svg(csv_path, tmp_path / "b.svg", "t").read_bytes()
    assert first == second


def test_trend_svg_renders(tmp_path):
    csv_path = tmp_path / "rcs_grid.csv"
    csv_path.write_text(
        "k,c,macro,micro,requests\n"
        "1,2,0.5,0.5,10\n1,4,0.75,0.75,10\n"
        "3,2,0.25,0.2,10\n3,4,0.5,0.4,10\n"
    )
    svg = render_trend_svg(csv_path, tmp_path / "trend.svg", "tier", "macro")
    body = svg.read_text()
    assert "<svg" in body


def test_summary_svg_renders(tmp_path):
    rows = [["logloss", 0.7, 0.6, 0.1, 1.05, 0.8], ["distill", "", 0.9, "", "", ""]]
    svg = render_summary_svg(rows, tmp_path / "summary.svg", "macro")
    assert svg.read_bytes().startswith(b"<?xml")


def test_report_before_evaluate_lists_missing(small_config_file):
    cfg = load_config(small_config_file)
    with pytest.raises(MissingPrerequisiteError) as exc:
        cmd_report(cfg)
    message = str(exc.value)
    assert "logloss" in message
    assert "distill" in message
    assert "evaluate" in message


class TestFullReport:
    def test_summary_rows_follow_config_order(self, small_experiment):
        cfg = small_experiment
        ws = Workspace(cfg)
        cmd_report(cfg)
        lines = (ws.report_dir / "summary.csv").read_text().splitlines()
        assert lines[0] == "tier,single_objective_rcs,rcs,ece,pcoc,auc"
        tiers = [line.split(",")[0] for line in lines[1:]]
        expected = [name for name in cfg.tiers if name != "rank"]
        assert tiers == expected

    def test_all_svgs_written(self, small_experiment):
        cfg = small_experiment
        ws = Workspace(cfg)
        cmd_report(cfg)
        assert (ws.report_dir / "summary.svg").exists()
        for tag in [name for name in cfg.tiers if name != "rank"]:
            assert (ws.report_dir / f"rcs_trend_{tag}.svg").exists()
            assert (ws.report_dir / f"hist_{tag}_preranking_set.svg").exists()
            assert (ws.report_dir / f"hist_{tag}_win_set.svg").exists()

    def test_report_rerun_is_byte_identical(self, small_experiment):
        cfg = small_experiment
        ws = Workspace(cfg)
        cmd_report(cfg)
        before = {
            p.name: p.read_bytes() for p in sorted(ws.report_dir.iterdir())
        }
        cmd_report(cfg)
        after = {p.name: p.read_bytes() for p in sorted(ws.report_dir.iterdir())}
        assert before == after

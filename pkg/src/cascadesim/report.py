"""Summary table and SVG plot emission.

Plots are rendered headlessly and deterministically: a fixed hash salt pins
matplotlib's generated element ids, glyphs are embedded as paths, and the
creation date is stripped, so identical inputs yield identical SVG bytes.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .config import ExperimentConfig
from .core import MissingPrerequisiteError
from .harness import Workspace, summary_sizes, update_manifest
from .logio import write_csv

__all__ = [
    "cmd_report",
    "render_histogram_svg",
    "render_trend_svg",
    "render_summary_svg",
]

_SVG_SALT = "cascadesim"

SUMMARY_COLUMNS = ["tier", "single_objective_rcs", "rcs", "ece", "pcoc", "auc"]


def _configure() -> None:
    plt.rcParams["svg.hashsalt"] = _SVG_SALT
    plt.rcParams["svg.fonttype"] = "path"


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _read_rows(path: Path) -> list[dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def render_histogram_svg(csv_path: Path, svg_path: Path, title: str) -> Path:
    """Paired pre-rank/rank score distributions; bare axes when the CSV is empty."""
    _configure()
    rows = _read_rows(csv_path)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.set_xlabel("predicted probability")
    ax.set_ylabel("proportion")
    ax.set_title(title)
    if rows:
        lo = [float(r["bucket_lo"]) for r in rows]
        hi = [float(r["bucket_hi"]) for r in rows]
        edges = lo + [hi[-1]]
        pre = [float(r["prerank"]) for r in rows]
        rank = [float(r["rank"]) for r in rows]
        ax.stairs(pre, edges, label="pre-rank", color="#1f77b4")
        ax.stairs(rank, edges, label="rank", color="#d62728")
        ax.legend()
    else:
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.0)
    _save(fig, svg_path)
    return svg_path


def render_trend_svg(csv_path: Path, svg_path: Path, title: str, mode: str) -> Path:
    """RCS versus competitive-set size, one line per win-set size."""
    _configure()
    rows = _read_rows(csv_path)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.set_xlabel("competitive set size c")
    ax.set_ylabel(f"RCS ({mode})")
    ax.set_title(title)
    by_k: dict[int, list[tuple[int, float]]] = {}
    for r in rows:
        by_k.setdefault(int(r["k"]), []).append((int(r["c"]), float(r[mode])))
    for k in sorted(by_k):
        points = sorted(by_k[k])
        ax.plot(
            [c for c, _ in points],
            [v for _, v in points],
            marker="o",
            label=f"k={k}",
        )
    if by_k:
        ax.set_ylim(0.0, 1.05)
        ax.legend()
    _save(fig, svg_path)
    return svg_path


def render_summary_svg(rows: list[list], svg_path: Path, mode: str) -> Path:
    """Bar chart of fused and single-objective RCS per tier."""
    _configure()
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.set_ylabel(f"RCS ({mode})")
    ax.set_title("Pre-rank tier consistency")
    tiers = [r[0] for r in rows]
    single = [r[1] for r in rows]
    fused = [r[2] for r in rows]
    x = range(len(tiers))
    width = 0.38
    ax.bar([i - width / 2 for i in x], [v if v != "" else 0.0 for v in single],
           width, label="single-objective", color="#1f77b4")
    ax.bar([i + width / 2 for i in x], [v if v != "" else 0.0 for v in fused],
           width, label="fused", color="#d62728")
    ax.set_xticks(list(x))
    ax.set_xticklabels(tiers, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.05)
    if tiers:
        ax.legend()
    fig.tight_layout()
    _save(fig, svg_path)
    return svg_path


def _grid_value(path: Path, k: int, c: int, mode: str) -> float:
    for row in _read_rows(path):
        if int(row["k"]) == k and int(row["c"]) == c:
            return float(row[mode])
    raise MissingPrerequisiteError(
        f"{path} has no (k={k}, c={c}) row; rerun `cascadesim evaluate` with a "
        f"grid that includes the serving sizes"
    )


def _single_objective_value(path: Path, objective: str, k: int, c: int, mode: str):
    if not path.exists():
        return ""
    for row in _read_rows(path):
        if row["objective"] == objective and int(row["k"]) == k and int(row["c"]) == c:
            return float(row[mode])
    return ""


def _calibration_values(path: Path) -> tuple[object, object]:
    if not path.exists():
        return "", ""
    for row in _read_rows(path):
        if row["surface"] == "preranking_set":
            return float(row["ece"]), float(row["pcoc"])
    return "", ""


def _auc_value(path: Path):
    if not path.exists():
        return ""
    rows = _read_rows(path)
    return float(rows[0]["auc"]) if rows else ""


def cmd_report(cfg: ExperimentConfig) -> list[Path]:
    """Summary CSV plus SVG plots from previously computed metric CSVs."""
    ws = Workspace(cfg)
    if cfg.fixture is not None:
        tags = ["fixture"]
    else:
        tags = [name for name in cfg.tiers if name != "rank"]
    missing = [tag for tag in tags if not (ws.eval_dir(tag) / "rcs_grid.csv").exists()]
    if missing:
        raise MissingPrerequisiteError(
            "missing evaluate outputs for: "
            + ", ".join(missing)
            + "; produce them with `cascadesim evaluate`"
        )
    k_star, c_star = summary_sizes(cfg)
    mode = cfg.evaluation.mode
    ws.report_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    summary_rows: list[list] = []
    for tag in tags:
        eval_dir = ws.eval_dir(tag)
        summary_rows.append(
            [
                tag,
                _single_objective_value(
                    eval_dir / "single_objective.csv", "pctr", k_star, c_star, mode
                ),
                _grid_value(eval_dir / "rcs_grid.csv", k_star, c_star, mode),
                *_calibration_values(eval_dir / "calibration.csv"),
                _auc_value(eval_dir / "auc.csv"),
            ]
        )
    summary_path = ws.report_dir / "summary.csv"
    write_csv(summary_path, SUMMARY_COLUMNS, summary_rows)
    written.append(summary_path)

    for tag in tags:
        eval_dir = ws.eval_dir(tag)
        written.append(
            render_trend_svg(
                eval_dir / "rcs_grid.csv",
                ws.report_dir / f"rcs_trend_{tag}.svg",
                f"RCS grid: {tag}",
                mode,
            )
        )
        for surface in ("preranking_set", "win_set"):
            csv_path = eval_dir / f"hist_{surface}.csv"
            if csv_path.exists():
                written.append(
                    render_histogram_svg(
                        csv_path,
                        ws.report_dir / f"hist_{tag}_{surface}.svg",
                        f"{tag}: {surface.replace('_', ' ')}",
                    )
                )

    written.append(render_summary_svg(summary_rows, ws.report_dir / "summary.svg", mode))
    update_manifest(ws, cfg.seed, written)
    return written

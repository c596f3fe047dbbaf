"""Shared fixtures: one small end-to-end experiment reused across test files."""

import json

import pytest

from cascadesim.config import parse_experiment
from cascadesim.harness import (
    Workspace,
    cmd_diagnose,
    cmd_evaluate,
    cmd_generate,
    cmd_simulate,
    cmd_train,
)


def small_doc(out_dir: str, seed: int = 3) -> dict:
    return {
        "seed": seed,
        "out_dir": out_dir,
        "world": {
            "d": 6,
            "d_u": 3,
            "corpus_size": 80,
            "requests_per_epoch": 40,
            "sizes": {"n": 20, "c": 8, "k": 3},
            "bid_range": [0.5, 5.0],
        },
        "eval_requests": 15,
        "tiers": {
            "rank": {
                "hidden_dims": [8],
                "mask_fraction": 1.0,
                "transform": "sigmoid",
                "samples_per_request": 10,
                "training": {
                    "loss": "logloss",
                    "learning_rate": 0.2,
                    "epochs": 2,
                    "batch_size": 32,
                },
            },
            "logloss": {
                "hidden_dims": [8],
                "mask_fraction": 0.75,
                "transform": "sigmoid",
                "training": {
                    "loss": "logloss",
                    "learning_rate": 0.2,
                    "epochs": 2,
                    "batch_size": 32,
                },
            },
            "logloss-small": {
                "hidden_dims": [8],
                "mask_fraction": 0.25,
                "transform": "sigmoid",
                "training": {
                    "loss": "logloss",
                    "learning_rate": 0.2,
                    "epochs": 2,
                    "batch_size": 32,
                },
            },
            "distill": {
                "hidden_dims": [8],
                "mask_fraction": 0.75,
                "transform": "sigmoid",
                "training": {
                    "loss": "distill",
                    "learning_rate": 0.05,
                    "epochs": 2,
                    "batch_size": 32,
                },
            },
            "ltr": {
                "hidden_dims": [8],
                "mask_fraction": 0.75,
                "transform": "exp",
                "training": {
                    "loss": "ranknet",
                    "learning_rate": 0.02,
                    "epochs": 2,
                    "batch_size": 4,
                    "chunks": 2,
                },
            },
        },
        "evaluation": {"k_grid": [1, 3], "c_grid": [3, 8], "mode": "macro"},
    }


def fixture_doc(out_dir: str) -> dict:
    return {
        "seed": 0,
        "out_dir": out_dir,
        "fixture": {
            "k": 2,
            "c": 2,
            "items": [
                {"item_id": 1, "prerank": {"pctr": 0.4, "bid": 8.0}, "rank": {"pctr": 0.2, "bid": 8.0}},
                {"item_id": 2, "prerank": {"pctr": 0.5, "bid": 6.0}, "rank": {"pctr": 0.5, "bid": 6.0}},
                {"item_id": 3, "prerank": {"pctr": 0.6, "bid": 4.0}, "rank": {"pctr": 0.8, "bid": 4.0}},
            ],
        },
        "evaluation": {"k_grid": [1, 2, 3], "c_grid": [1, 2, 3]},
    }


@pytest.fixture(scope="session")
def small_experiment(tmp_path_factory):
    """Fully trained and evaluated small experiment, built once per session."""
    out = tmp_path_factory.mktemp("experiment") / "out"
    cfg = parse_experiment(small_doc(str(out)))
    cmd_generate(cfg)
    cmd_train(cfg, "rank")
    cmd_simulate(cfg, "collect")
    for tier in ("logloss", "logloss-small", "distill", "ltr"):
        cmd_train(cfg, tier)
    cmd_simulate(cfg)
    cmd_simulate(cfg, "logloss*2")
    cmd_evaluate(cfg)
    cmd_diagnose(cfg)
    return cfg


@pytest.fixture()
def small_ws(small_experiment):
    return Workspace(small_experiment)


@pytest.fixture(scope="session")
def fixture_experiment(tmp_path_factory):
    """The hand-set three-item fixture, generated and evaluated."""
    out = tmp_path_factory.mktemp("fixture") / "out"
    cfg = parse_experiment(fixture_doc(str(out)))
    cmd_generate(cfg)
    cmd_evaluate(cfg)
    return cfg


@pytest.fixture()
def small_config_file(tmp_path):
    """A fresh copy of the small config pointing at an empty out dir."""
    out = tmp_path / "out"
    path = tmp_path / "config.json"
    path.write_text(json.dumps(small_doc(str(out))))
    return path

import json
import os

import numpy as np
import pytest

from actground.cli import main
from actground.config import (ConfigError, ExperimentConfig, env_overrides,
                              load_config, preset)
from actground.evaluation import read_results
from actground.models import ReprSpec
from actground.training import LangLearnConfig


def test_presets_validate():
    for name in ("blocks-desk", "blocks-paper", "strings-desk", "strings-paper"):
        for cond in ("baseline", "envlearn", "envlearn+discrete",
                     "envlearn+discrete+match"):
            cfg = preset(name, cond)
            assert cfg.validate() is cfg


def test_match_condition_requires_lambda():
    from dataclasses import replace
    cfg = preset("blocks-desk", "envlearn+discrete+match")
    with pytest.raises(ConfigError, match="lam"):
        replace(cfg, lang_learn=LangLearnConfig(lam=0.0)).validate()


def test_discrete_condition_requires_discrete_spec():
    cfg = preset("blocks-desk", "envlearn+discrete")
    from dataclasses import replace
    with pytest.raises(ConfigError, match="repr_spec"):
        replace(cfg, repr_spec=ReprSpec.continuous(10)).validate()


def test_baseline_forbids_matching():
    from dataclasses import replace
    cfg = preset("blocks-desk", "baseline")
    with pytest.raises(ConfigError, match="lam"):
        replace(cfg, lang_learn=LangLearnConfig(lam=0.5)).validate()


def test_baseline_decoder_not_frozen():
    assert preset("blocks-desk", "baseline").decoder_frozen is False
    assert preset("blocks-desk", "envlearn").decoder_frozen is True
    assert preset("strings-desk", "envlearn").decoder_frozen is False


def test_load_config_preset_and_override(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({
        "preset": "strings-desk",
        "condition": "baseline",
        "repr_spec": {"mode": "continuous", "dim": 20, "n": 0, "k": 0},
        "lang_learn": {"lam": 0.0},
        "sweep_sizes": [10, 50],
    }))
    cfg = load_config(str(p))
    assert cfg.task == "strings"
    assert cfg.condition == "baseline"
    assert cfg.repr_spec.dim == 20
    assert cfg.sweep_sizes == (10, 50)


def test_load_config_include_chain(tmp_path):
    (tmp_path / "base.json").write_text(json.dumps(
        {"preset": "blocks-desk", "num_sessions": 5}))
    (tmp_path / "child.json").write_text(json.dumps(
        {"include": "base.json", "session_length": 7}))
    cfg = load_config(str(tmp_path / "child.json"))
    assert (cfg.num_sessions, cfg.session_length) == (5, 7)


def test_load_config_unknown_preset(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "nonexistent"}))
    with pytest.raises(ConfigError, match="preset"):
        load_config(str(p))


def test_load_config_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(str(p))


def test_env_overrides():
    out = env_overrides({"ACTGROUND_SCALE": "paper",
                         "ACTGROUND_NUM_SESSIONS": "7",
                         "ACTGROUND_SEEDS": "4,5",
                         "OTHER": "ignored"})
    assert out == {"scale": "paper", "num_sessions": 7, "seeds": (4, 5)}
    with pytest.raises(ConfigError, match="ACTGROUND_BOGUS"):
        env_overrides({"ACTGROUND_BOGUS": "1"})


# ---------------------------------------------------------------------------
# CLI behavior


def _tiny_config(tmp_path, **extra):
    cfg = {
        "preset": "blocks-desk",
        "env_learn": {"total_batches": 3},
        "lang_learn": {"lam": 0.01, "epochs_per_new_example": 1},
        "num_sessions": 1, "session_length": 2,
        "seeds": [0],
        "data_dir": str(tmp_path / "data"),
        "checkpoint_dir": str(tmp_path / "ckpt"),
        "results_dir": str(tmp_path / "results"),
        "consistency_samples": 8,
    }
    cfg.update(extra)
    p = tmp_path / "config.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def test_cli_invalid_config_exits_2(tmp_path):
    path = _tiny_config(tmp_path, condition="baseline")  # lam>0 with baseline
    assert main(["lang-eval", "--task", "blocks", "--config", path]) == 2


def test_cli_missing_checkpoint_exits_3(tmp_path, capsys):
    path = _tiny_config(tmp_path)
    code = main(["lang-eval", "--task", "blocks", "--config", path])
    assert code == 3
    assert "checkpoint" in capsys.readouterr().err


def test_cli_full_tiny_pipeline(tmp_path):
    path = _tiny_config(tmp_path)
    assert main(["gen-data", "--task", "blocks", "--config", path]) == 0
    assert main(["env-learn", "--task", "blocks", "--config", path]) == 0
    assert main(["lang-eval", "--task", "blocks", "--config", path]) == 0
    assert main(["analyze", "--task", "blocks", "--config", path]) == 0
    csv_path = tmp_path / "results" / "blocks-desk.csv"
    rows = read_results(csv_path)
    assert len(rows) == 1
    assert rows[0].condition == "envlearn+discrete+match"
    # idempotent rerun: identical CSV modulo the timestamp column
    first = csv_path.read_text()
    assert main(["lang-eval", "--task", "blocks", "--config", path]) == 0
    second = csv_path.read_text()
    strip = lambda text: [",".join(line.split(",")[:-1])
                          for line in text.splitlines()]
    assert strip(first) == strip(second)
    # run records written with config snapshots
    recs = list((tmp_path / "results").glob("*.json"))
    assert recs
    snap = json.loads(recs[0].read_text())
    assert "config" in snap and snap["config"]["task"] == "blocks"


def test_cli_verify_fast_exits_zero(capsys):
    assert main(["verify", "--fast"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out

import json

import pytest

from trimodal.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from trimodal.config import ConfigError, PipelineConfig, config_from_dict, load_config

TINY = {
    "seed": 5,
    "encoder": {"dim": 16, "layers": 1, "heads": 2, "max_len": 48},
    "synthetic": {"concepts": 40, "clusters": 8, "n_train": 40, "n_test": 12, "n_distill": 30, "n_distill_heldout": 6, "n_patients": 3, "queries_per_patient": 3},
    "train": {"epochs": 1, "batch_size": 16},
    "distill": {"epochs": 2, "batch_size": 16},
    "index": {"ef_construction": 40},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY), encoding="utf-8")
    return p


def run(*args):
    return main([str(a) for a in args])


# --- config ---------------------------------------------------------------------------------


def test_config_roundtrip():
    cfg = config_from_dict(TINY)
    assert cfg.encoder.dim == 16 and cfg.train.epochs == 1 and cfg.train.lr_max == PipelineConfig().train.lr_max
    again = config_from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert cfg.phase1().seed == 5 and cfg.index_params().dim == 16 and cfg.index_params().seed == 5
    assert cfg.rag_params().index.dim == 16


@pytest.mark.parametrize(
    "doc",
    [
        {"bogus": 1},
        {"train": {"learning_rate": 1}},
        {"train": {"lr_max": -1.0}},
        {"train": {"loss": {}}},
        {"index": {"dim": 8}},
        {"seed": -3},
        {"encoder": []},
    ],
)
def test_config_rejects_bad_documents(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_load_config_errors(tmp_path):
    assert load_config(None) == PipelineConfig()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[]", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


# --- commands -----------------------------------------------------------------------------------


def test_full_pipeline(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    for cmd in ("gen-synthetic", "train", "distill", "eval", "index-build", "index-query", "rag-eval"):
        assert run(cmd, "--config", cfg_path, "--out", out) == EXIT_OK, cmd
    for name in ("config.json", "data/train.jsonl", "data/vocab.json", "phase1.ckpt", "phase1_log.jsonl", "phase2.ckpt", "distill_report.json", "index.bin", "index_query.jsonl", "rag_report.json"):
        assert (out / name).exists(), name
    metrics = json.loads((out / "metrics_ensemble.json").read_text())
    assert metrics["n"] == 12 and 0 <= metrics["recall_at_1"] <= 1
    assert json.loads((out / "rag_report.json").read_text())["k"] == 1
    assert (out / "rag_index" / "Patient0.bin").exists()

    # existing outputs are never clobbered without --overwrite
    assert run("eval", "--config", cfg_path, "--out", out) == EXIT_USAGE
    assert "refusing to overwrite" in capsys.readouterr().err
    before = (out / "metrics_ensemble.json").read_bytes()
    assert run("eval", "--config", cfg_path, "--out", out, "--overwrite") == EXIT_OK
    assert (out / "metrics_ensemble.json").read_bytes() == before
    assert run("eval", "--config", cfg_path, "--out", out, "--modality", "sparse") == EXIT_OK
    assert json.loads((out / "metrics_sparse.json").read_text())["modality"] == "sparse"


def test_missing_checkpoint_names_the_path(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    assert run("gen-synthetic", "--config", cfg_path, "--out", out) == EXIT_OK
    assert run("eval", "--config", cfg_path, "--out", out) == EXIT_DATA
    assert str(out / "phase1.ckpt") in capsys.readouterr().err


def test_usage_errors(tmp_path, cfg_path):
    assert run("launch", "--out", tmp_path) == EXIT_USAGE
    assert run("eval", "--out", tmp_path, "--k", "0") == EXIT_USAGE
    assert run("eval", "--out", tmp_path, "--config", tmp_path / "nope.json") == EXIT_USAGE
    assert run("train", "--out", tmp_path / "empty") == EXIT_DATA


def test_seed_override_changes_data(tmp_path, cfg_path):
    assert run("gen-synthetic", "--config", cfg_path, "--out", tmp_path / "a") == EXIT_OK
    assert run("gen-synthetic", "--config", cfg_path, "--out", tmp_path / "b", "--seed", "9") == EXIT_OK
    cfg_a = json.loads((tmp_path / "a" / "config.json").read_text())
    cfg_b = json.loads((tmp_path / "b" / "config.json").read_text())
    assert cfg_a["seed"] == 5 and cfg_b["seed"] == 9

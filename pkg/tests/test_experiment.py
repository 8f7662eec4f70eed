import json

import numpy as np
import pytest

from ctxrank.experiment import (
    ExperimentConfig,
    ModelSpec,
    RunResult,
    StageError,
    _stage,
    build_report,
    report_json,
    report_table,
    run_experiment,
)

CONFIGS = __import__("pathlib").Path(__file__).resolve().parents[1] / "configs"


def test_default_config_roundtrip_and_hash():
    cfg = ExperimentConfig()
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.hash() == cfg.hash()
    assert ExperimentConfig(seed=1).hash() != cfg.hash()


@pytest.mark.parametrize("bad", [
    {"partition": "both"},
    {"unknown_block": {}},
    {"models": [{"name": "A"}, {"name": "A"}]},
    {"models": [{"name": "A", "kind": "bert"}]},
    {"metrics": {"cutoffs": [0]}},
    {"context": {"layers": 4}},
    {"trainer": {"lr": 0}},
    {"simulator": {"candidates_max": 80}},
    {"gbdt": {"enabled": True, "context_model": "NRM"}},
])
def test_bad_configs_rejected(bad):
    with pytest.raises((ValueError, TypeError)):
        ExperimentConfig.from_dict(bad)


def test_shipped_configs_load():
    paths = sorted(CONFIGS.glob("*.json"))
    assert paths
    for p in paths:
        ExperimentConfig.load(p)


def test_ablation_grid_in_shipped_config():
    cfg = ExperimentConfig.load(CONFIGS / "cohort_time.json")
    ablations = {m.ablation for m in cfg.models if m.kind == "cnrm"}
    assert ablations == {"full", "FQ", "FD", "FQD", "FD&FQD"}
    assert any(not m.pos_emb for m in cfg.models)
    assert any(not m.unbiased for m in cfg.models)


def test_stage_wraps_errors():
    with pytest.raises(StageError, match="stage 'cluster' failed: ValueError"):
        with _stage("cluster"):
            raise ValueError("boom")


def _fake_runs(cfg):
    rng = np.random.default_rng(0)
    qids = [f"q{i}" for i in range(40)]
    runs = {}
    for i, name in enumerate(["NRM", "CNRM", "bm25f"]):
        vals = np.clip(rng.random(40) + 0.1 * i, 0, 1)
        runs[name] = RunResult(name, "x", cfg.seed, cfg.hash(), qids, {"true@5": vals, "obs@5": vals})
    return runs


def test_report_hash_and_table_layout():
    cfg = ExperimentConfig(metrics={"cutoffs": [5]})
    a = build_report(cfg, _fake_runs(cfg), ["true@5", "obs@5"], {})
    b = build_report(cfg, _fake_runs(cfg), ["true@5", "obs@5"], {})
    assert a["report_hash"] == b["report_hash"]
    assert set(a["comparisons"]) == {"CNRM vs NRM", "bm25f vs NRM"}
    lines = report_table(a).splitlines()
    assert lines[0].startswith(f"config {cfg.hash()}")
    assert lines[1].split() == ["model", "NDCG@5", "delta"]
    assert [ln.split()[0] for ln in lines[3:6]] == ["bm25f", "NRM", "CNRM"]
    assert lines[-1].startswith("*")
    assert report_table(json.loads(report_json(a))) == report_table(a)


def test_experiment_is_deterministic(tmp_path):
    cfg = ExperimentConfig(seed=2, simulator={"n_users": 25},
                           trainer={"epochs": 1, "batch_size": 32, "warmup_steps": 5},
                           context={"layers": 1, "ffn": 16},
                           models=[{"name": "NRM", "kind": "nrm"}, {"name": "NRM-biased", "unbiased": False}],
                           baselines=["recency"])
    a = run_experiment(cfg)
    b = run_experiment(cfg, cache_dir=tmp_path)
    c = run_experiment(cfg, cache_dir=tmp_path)
    assert a["report_hash"] == b["report_hash"] == c["report_hash"]
    assert "NRM" in a["propensity"] and "NRM-biased" not in a["propensity"]
    assert len(a["propensity"]["NRM"]["mean_score"]) == 10


def test_cached_report_reuses_file(tmp_path):
    from ctxrank.experiment import cached_report

    cfg = ExperimentConfig(seed=4, simulator={"n_users": 20}, trainer={"epochs": 1, "warmup_steps": 5},
                           models=[{"name": "NRM", "kind": "nrm"}], baselines=[])
    a = cached_report(cfg, tmp_path)
    files = list((tmp_path / "reports").iterdir())
    assert len(files) == 1
    files[0].write_text(json.dumps({**a, "marker": 1}))
    assert cached_report(cfg, tmp_path)["marker"] == 1

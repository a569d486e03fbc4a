import json
from pathlib import Path

import numpy as np
import pytest

from faircand import clicklog, relevance, selector
from faircand.cli import load_dataset_artifact, main
from faircand.config import RunConfig, load_config, save_snapshot
from faircand.corpus import SplitSpec, split
from faircand.io import read_csv

from conftest import FIXTURE_DIR


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="session")
def desk_config():
    # desk-scale synthetic config shipped in-repo; every stage runs in
    # well under a second with it
    return FIXTURE_DIR / "desk.ini"


def _pipeline(tmp_path, desk_config, rule="monotone"):
    ds_path = tmp_path / "data.letor"
    model_path = tmp_path / "model.json"
    log_path = tmp_path / "log.csv"
    policy_path = tmp_path / "policy.json"
    assert run("ingest", "--config", desk_config, "--out", ds_path) == 0
    assert run("train", "--config", desk_config, "--dataset", ds_path,
               "--out", model_path) == 0
    assert run("simulate", "--config", desk_config, "--dataset", ds_path,
               "--model", model_path, "--out", log_path) == 0
    assert run("select", "--config", desk_config, "--log", log_path,
               "--model", model_path, "--dataset", ds_path,
               "--rule", rule, "--out", policy_path) == 0
    return ds_path, model_path, log_path, policy_path


class TestPipeline:
    def test_ingest_creates_artifact_with_config(self, tmp_path, desk_config):
        out = tmp_path / "data.letor"
        assert run("ingest", "--config", desk_config, "--out", out) == 0
        assert out.exists()
        meta = json.loads(out.with_suffix(".json").read_text())
        assert meta["kind"] == "synthetic"
        assert meta["config"]["m"] == 400
        ds, _ = load_dataset_artifact(out)
        assert ds.n_queries == 80
        assert ds.groups == ("adv", "disadv")

    def test_ingest_letor_file(self, tmp_path):
        out = tmp_path / "toy.letor"
        assert run("ingest", "--input", FIXTURE_DIR / "toy.letor",
                   "--group-feature", "3", "--out", out) == 0
        ds, meta = load_dataset_artifact(out)
        assert meta["kind"] == "letor"
        assert ds.n_queries == 12
        assert set(ds.groups) == {"adv", "disadv"}

    def test_full_pipeline_and_wrapper_equivalence(self, tmp_path, desk_config):
        ds_path, model_path, log_path, policy_path = _pipeline(tmp_path, desk_config)
        policy = selector.load_policy(policy_path)
        # the subcommand is a thin wrapper over the library-level algorithm
        model = relevance.load_model(model_path)
        log = clicklog.load_log_csv(log_path)
        ds, _ = load_dataset_artifact(ds_path)
        from faircand.corpus import average_relevant

        ar = {g: average_relevant(ds, g) for g in ds.groups}
        targets = selector.equal_opportunity_targets(ar, 2.0)
        config = selector.SelectionConfig(
            targets=targets, t_max={g: 5 for g in ds.groups},
            alpha=0.2, rule="monotone", lam=10.0,
        )
        direct = selector.algorithm1(log, model, config)
        assert policy.thresholds == direct.thresholds
        bounds = policy_path.with_suffix(".bounds.csv")
        rows, config_snapshot = read_csv(bounds)
        assert config_snapshot["alpha"] == 0.2
        assert {r["group"] for r in rows} == {"adv", "disadv"}

    def test_evaluate(self, tmp_path, desk_config):
        ds_path, model_path, _log, policy_path = _pipeline(tmp_path, desk_config)
        out = tmp_path / "results.csv"
        assert run("evaluate", "--config", desk_config, "--policy", policy_path,
                   "--dataset", ds_path, "--model", model_path, "--out", out) == 0
        rows, _ = read_csv(out)
        assert len(rows) == 2
        assert {r["group"] for r in rows} == {"adv", "disadv"}
        for r in rows:
            assert r["er"] in ("0", "1")

    def test_select_fingerprint_mismatch_fails(self, tmp_path, desk_config, capsys):
        ds_path, model_path, log_path, _ = _pipeline(tmp_path, desk_config)
        other = tmp_path / "other_model.json"
        relevance.save_model(relevance.ConstantModel(0.5), other)
        code = run("select", "--config", desk_config, "--log", log_path,
                   "--model", other, "--dataset", ds_path,
                   "--out", tmp_path / "p.json")
        assert code == 1
        assert "fingerprint" in capsys.readouterr().err

    def test_missing_artifact_fails(self, tmp_path, capsys):
        code = run("train", "--dataset", tmp_path / "missing.letor",
                   "--out", tmp_path / "m.json")
        assert code == 1
        assert "ingest" in capsys.readouterr().err


class TestExperiment:
    def test_sweep_outputs(self, tmp_path, desk_config):
        out_dir = tmp_path / "exp"
        assert run("experiment", "--config", desk_config, "--out", out_dir) == 0
        rows, config = read_csv(out_dir / "results.csv")
        # 2 sweep values x 2 replications x 3 methods x 2 groups
        assert len(rows) == 2 * 2 * 3 * 2
        agg, _ = read_csv(out_dir / "aggregate.csv")
        assert len(agg) == 2 * 3 * 2
        assert (out_dir / "config.snapshot.ini").exists()
        assert config["replications"] == 2

    def test_snapshot_rerun_is_byte_identical(self, tmp_path, desk_config):
        first = tmp_path / "exp1"
        second = tmp_path / "exp2"
        assert run("experiment", "--config", desk_config, "--out", first) == 0
        snapshot = first / "config.snapshot.ini"
        assert run("experiment", "--config", snapshot, "--out", second) == 0
        for name in ("results.csv", "aggregate.csv", "config.snapshot.ini"):
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_report_renders_figures(self, tmp_path, desk_config):
        out_dir = tmp_path / "exp"
        assert run("experiment", "--config", desk_config, "--out", out_dir) == 0
        figures = tmp_path / "figs"
        assert run("report", "--aggregate", out_dir / "aggregate.csv",
                   "--out", figures) == 0
        assert (figures / "figure_m_sweep.png").exists()
        assert (figures / "figure_m_sweep.png").stat().st_size > 10_000


class TestConfig:
    def test_defaults_mirror_reference_protocol(self):
        config = RunConfig()
        assert config.m == 100_000
        assert config.lam == 100.0
        assert config.t_max == 50
        assert config.alpha == 0.1
        assert config.target_total == 5.0
        assert config.split_fractions() == (0.01, 0.69, 0.30)
        assert config.replications == 50

    def test_default_snapshot_echoes_defaults(self, tmp_path, desk_config):
        out = tmp_path / "data.letor"
        assert run("ingest", "--synthetic", "--synth-queries", "30", "--out", out) == 0
        meta = json.loads(out.with_suffix(".json").read_text())
        snap = meta["config"]
        assert snap["m"] == 100_000
        assert snap["lam"] == 100.0
        assert snap["t_max"] == 50
        assert snap["alpha"] == 0.1
        assert snap["target_total"] == 5.0
        assert (snap["train_fraction"], snap["sim_fraction"], snap["test_fraction"]) == (
            0.01, 0.69, 0.30,
        )
        assert snap["replications"] == 50

    def test_flags_override_file(self, tmp_path, desk_config):
        config = load_config(desk_config)
        assert config.m == 400
        out = tmp_path / "snap.ini"
        save_snapshot(config, out)
        reloaded = load_config(out)
        assert reloaded == config

    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[log]\nmm = 3\n")
        with pytest.raises(ValueError, match="unknown key"):
            load_config(bad)

    def test_explicit_targets_parse(self):
        config = RunConfig(targets="adv=2.5, disadv=1.5")
        assert config.explicit_targets() == {"adv": 2.5, "disadv": 1.5}

import json

import jsonschema
import pytest

from cicf_lab import cli
from cicf_lab.config import load
from cicf_lab.errors import ConfigError
from cicf_lab.reports import (COHERENCE_SCHEMA, COMPARE_SCHEMA, EVAL_SCHEMA, SE_REPORT_SCHEMA,
                              SUMMARY_SCHEMA)

SMALL = {
    "data": {"preset": "confounded-3"},
    "model": {"hidden": [4]},
    "clustering": {"K": 2},
    "training": {"epochs": 2, "beta": 0.1, "alpha": 0.1, "M": 32, "M_l": 40},
    "analysis": {"trials": 200, "M_sweep": [4, 8], "compare_M": 16, "compare_iterations": 20},
    "seeds": [0, 1],
    "domains": [2],
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(SMALL))
    return path


def run(config, out, *args):
    return cli.main([*args, "--config", str(config), "--out", str(out)])


def read(path):
    return json.loads(path.read_text())


def test_train_writes_outputs(config, tmp_path):
    out = tmp_path / "o"
    assert run(config, out, "train", "--method", "cicf") == 0
    summary = read(out / "summary.json")
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    assert summary["domains"]["2"]["n_seeds"] == 2
    assert (out / "models" / "cicf_domain2_seed1.json").exists()
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == "method,test_domain,seed,epoch,split,domain,loss,accuracy"
    assert read(out / "resolved-config.json")["training"]["alpha"] == 0.1


def test_cicf_with_zero_alpha_matches_erm(config, tmp_path):
    assert run(config, tmp_path / "e", "train", "--method", "erm") == 0
    assert run(config, tmp_path / "c", "train", "--method", "cicf",
               "--set", "training.alpha=0") == 0
    e, c = read(tmp_path / "e" / "summary.json"), read(tmp_path / "c" / "summary.json")
    assert e["domains"] == c["domains"]


def test_seed_flag_restricts_seeds(config, tmp_path):
    assert run(config, tmp_path / "o", "train", "--method", "maml", "--seed", "5") == 0
    assert read(tmp_path / "o" / "summary.json")["seeds"] == [5]


def test_analysis_commands(config, tmp_path):
    out = tmp_path / "o"
    assert run(config, out, "cluster") == 0
    coh = read(out / "coherence.json")
    jsonschema.validate(coh, COHERENCE_SCHEMA)
    assert coh["K_dagger"] == 4
    assert (out / "assignment.csv").read_text().startswith("sample_id,class_id,cluster_id\n")
    assert run(config, out, "analyze-se") == 0
    se = read(out / "se_report.json")
    jsonschema.validate(se, SE_REPORT_SCHEMA)
    assert [r["M"] for r in se["reports"]] == [4, 8]
    assert run(config, out, "compare-samplers") == 0
    jsonschema.validate(read(out / "compare_samplers.json"), COMPARE_SCHEMA)


def test_eval_after_train(config, tmp_path):
    out = tmp_path / "o"
    assert run(config, out, "train", "--method", "erm") == 0
    assert run(config, out, "eval") == 0
    ev = read(out / "eval.json")
    jsonschema.validate(ev, EVAL_SCHEMA)
    summary = read(out / "summary.json")
    got = sorted(e["accuracy"] for e in ev["evaluations"])
    assert got == sorted(summary["domains"]["2"]["per_seed"])


def test_unknown_key_is_config_error(config, tmp_path, capsys):
    assert run(config, tmp_path / "o", "cluster", "--set", "training.bogus=1") == 1
    assert "unknown key 'training.bogus'" in capsys.readouterr().err


def test_invalid_value_is_config_error(config, tmp_path):
    assert run(config, tmp_path / "o", "train", "--method", "erm",
               "--set", "training.beta=-1") == 1


def test_missing_domain_is_config_error(config, tmp_path):
    assert run(config, tmp_path / "o", "train", "--method", "erm", "--set", "domains=[7]") == 1


def test_divergence_exit_code(config, tmp_path):
    assert run(config, tmp_path / "o", "train", "--method", "erm",
               "--set", "training.beta=1e300", "--set", 'model.activation="relu"') == 2


def test_io_error_exit_code(config, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(config, blocker / "sub", "cluster") == 3
    assert cli.main(["cluster", "--config", str(tmp_path / "missing.json")]) == 3


def test_malformed_json_is_config_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    assert cli.main(["cluster", "--config", str(p)]) == 1


def test_override_parsing(config):
    cfg = load(config, ["training.alpha=0.5", "data.preset=pacs-like"])
    assert cfg["training"]["alpha"] == 0.5
    assert cfg["data"]["preset"] == "pacs-like"
    with pytest.raises(ConfigError):
        load(config, ["training.alpha"])


def test_csv_data_source(config, tmp_path):
    from cicf_lab.data import generate, preset, save_csv
    save_csv(generate(preset("confounded-3")), tmp_path / "d.csv")
    cfg = dict(SMALL, data={"csv": "d.csv"})
    p = tmp_path / "csv.json"
    p.write_text(json.dumps(cfg))
    assert run(p, tmp_path / "o", "cluster") == 0
    resolved = read(tmp_path / "o" / "resolved-config.json")
    assert resolved["data"]["csv"] == str(tmp_path / "d.csv")


def test_threads_env(config, tmp_path, monkeypatch):
    monkeypatch.setenv("CICF_LAB_THREADS", "2")
    assert run(config, tmp_path / "p", "train", "--method", "erm") == 0
    monkeypatch.delenv("CICF_LAB_THREADS")
    assert run(config, tmp_path / "s", "train", "--method", "erm") == 0
    assert (tmp_path / "p" / "metrics.csv").read_bytes() == (tmp_path / "s" / "metrics.csv").read_bytes()

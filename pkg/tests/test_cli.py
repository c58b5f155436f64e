import json
import shutil
import subprocess
import sys

import pytest

from eatvul import cli
from eatvul.config import RunConfig

FILES = ("metrics.json", "report.json", "fga_log.jsonl", "pool.jsonl", "projection.csv",
         "attack_results.jsonl", "features.json")


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    outs = []
    for name in ("a", "b"):
        out = base / name
        assert cli.main(["all", "--out", str(out)]) == 0
        outs.append(out)
    return outs


def test_full_pipeline_reaches_asr_one(two_runs):
    metrics = json.loads((two_runs[0] / "metrics.json").read_text())
    assert metrics["asr"] == 1.0 and metrics["snippet_size"] == 4
    assert metrics["unevaluated"] == []
    assert set(metrics["topk"]) == {"5", "10", "15", "20"}
    for key in ("clean_f1", "config_hash", "seeds", "query_count"):
        assert key in metrics


def test_rerun_is_byte_identical(two_runs):
    a, b = two_runs
    for name in FILES:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_every_artifact_carries_the_hash(two_runs):
    run = two_runs[0]
    h = json.loads((run / "metrics.json").read_text())["config_hash"]
    assert json.loads((run / "fga_result.json").read_text())["config_hash"] == h
    assert json.loads((run / "pool.jsonl").read_text().split("\n")[0])["pool"]["config_hash"] == h
    manifest = json.loads((run / "manifest.json").read_text())
    assert {e["config_hash"] for e in manifest["stages"].values()} == {h}


def test_figures_rendered(two_runs):
    figs = sorted(p.name for p in (two_runs[0] / "figures").glob("*.png"))
    assert figs == ["fga_convergence.png", "projection.png", "topk.png"]


def test_projection_header(two_runs):
    assert (two_runs[0] / "projection.csv").read_text().split("\n")[0] == "x,y,label,adversarial"


def test_attack_before_run_fga(tmp_path, capsys):
    assert cli.main(["ingest", "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    assert cli.main(["attack", "--out", str(tmp_path)]) == 1
    assert "requires generation log / pool" in capsys.readouterr().err


def test_missing_upstream_names_subcommand(tmp_path, capsys):
    assert cli.main(["extract-features", "--out", str(tmp_path)]) == 1
    assert "run `" in capsys.readouterr().err


def test_report_refuses_mixed_configs(two_runs, tmp_path, capsys):
    mixed = tmp_path / "mixed"
    shutil.copytree(two_runs[0], mixed)
    other = tmp_path / "other"
    assert cli.main(["all", "--out", str(other), "--seed", "1", "--no-figures"]) == 0
    shutil.copy(other / "metrics.json", mixed / "metrics.json")
    capsys.readouterr()
    assert cli.main(["report", "--out", str(mixed), "--no-figures"]) == 1
    assert "different configs" in capsys.readouterr().err


def test_stage_refuses_foreign_upstream(two_runs, tmp_path, capsys):
    run = tmp_path / "r"
    shutil.copytree(two_runs[0], run)
    capsys.readouterr()
    assert cli.main(["attack", "--out", str(run), "--snippet-size", "2"]) == 1
    assert "produced under config" in capsys.readouterr().err


def test_flags_override_file(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seeds: {fga: 5}\nattack: {snippet_size: 3}\nvictim: {kind: self}\n")
    args = cli.build_parser().parse_args(["attack", "--config", str(cfg), "--snippet-size", "2"])
    rc = cli.resolve_config(args)
    assert rc.get("attack", "snippet_size") == 2
    assert rc.get("victim", "kind") == "self"
    assert rc.get("seeds", "fga") == 5
    args = cli.build_parser().parse_args(["attack", "--config", str(cfg), "--seed", "9",
                                          "--victim", "bow", "--generator", "remote"])
    rc = cli.resolve_config(args)
    assert set(rc.get("seeds").values()) == {9}
    assert rc.get("victim", "kind") == "bow" and rc.get("generator", "kind") == "remote"


def test_bad_config_reported(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("attack: {snippet_sise: 3}\n")
    assert cli.main(["ingest", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "unknown config key 'attack.snippet_sise'" in capsys.readouterr().err


def test_path_keys_do_not_change_hash():
    a = RunConfig({"dataset": "/data/x.jsonl", "pool": {"path": "/p"}})
    assert a.digest() == RunConfig().digest()
    assert RunConfig({"svm": {"C": 1.0}}).digest() != RunConfig().digest()


def test_invalid_values_rejected():
    from eatvul.errors import ConfigError

    for bad in ({"attack": {"snippet_size": -1}}, {"victim": {"kind": "gpu"}},
                {"split": {"fractions": [0.5, 0.5, 0.5]}}, {"attack": {"topk": [0]}}):
        with pytest.raises(ConfigError):
            RunConfig(bad)


def test_yaml_round_trip(tmp_path):
    cfg = RunConfig({"svm": {"C": 0.5}})
    path = tmp_path / "c.yaml"
    path.write_text(cfg.to_yaml())
    assert RunConfig.from_file(path).digest() == cfg.digest()


def test_console_script_help():
    exe = shutil.which("eatvul")
    cmd = [exe] if exe else [sys.executable, "-m", "eatvul.cli"]
    out = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in ("ingest", "train-surrogate", "extract-features", "gen-snippets", "build-pool",
                 "run-fga", "attack", "report", "project"):
        assert name in out.stdout


def test_exponent_floats_from_yaml(tmp_path):
    from eatvul.errors import ConfigError

    cfg = tmp_path / "c.yaml"
    cfg.write_text("fga: {epsilon: 1e-4}\nvictim: {bow: {l2: 1e-2}}\n")
    rc = RunConfig.from_file(cfg)
    assert rc.get("fga", "epsilon") == 1e-4 and rc.get("victim", "bow", "l2") == 0.01
    cfg.write_text("fga: {population_size: many}\n")
    with pytest.raises(ConfigError, match="fga.population_size"):
        RunConfig.from_file(cfg)

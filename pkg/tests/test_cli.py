import json
import os
import subprocess
import sys

import pytest

from ctxlm.cli import main
from ctxlm.pipeline import (DEFAULT_CONFIG, PIPELINE, ValidationError, apply_override, build_report,
                            load_config, report_table, run_pipeline, validate_config)

TINY = {
    "data": {"synth": {"n_conversations": 120}},
    "adapter": {"epochs": 2, "d_e": 4, "d_h": 6},
    "topic": {"epochs": 2, "d_e": 4, "d_h": 4},
    "nlm": {"epochs": 1, "d_e": 4, "d_h": 6,
            "variants": [{"name": "nlm-none", "mode": "NONE", "derived": False},
                         {"name": "nlm-avg-derived", "mode": "AVG_CONCAT", "derived": True}]},
    "noise": {"n": 5},
    "eval": {"lm_scale_grid": [0.0, 0.5, 1.0],
             "scorers": ["none", "static", "dynamic-1pass", "dynamic-2pass", "nlm-avg-derived"]},
}


def write_config(tmp_path, out, extra=None):
    cfg = json.loads(json.dumps(TINY))
    cfg["output_dir"] = str(out)
    cfg["schema_version"] = 1
    for k, v in (extra or {}).items():
        cfg[k] = v
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def tree(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, fs in os.walk(root) for f in fs)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg_path = write_config(tmp, tmp / "run")
    for stage in PIPELINE:
        assert main([stage, "-c", cfg_path]) == 0, stage
    return tmp / "run", cfg_path


def test_defaults_are_valid():
    assert validate_config(DEFAULT_CONFIG) == []
    assert load_config()["seed"] == 0


def test_validation_collects_all_errors():
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    cfg["noise"]["p_sub"] = -0.1
    cfg["ngram"]["method"] = "magic"
    cfg["eval"]["scorers"].append("nonexistent")
    cfg["schema_version"] = 7
    errs = validate_config(cfg)
    assert len(errs) == 4


def test_overrides_parse_json_values():
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    apply_override(cfg, "noise.p_sub=0.1")
    apply_override(cfg, "output_dir=elsewhere")
    apply_override(cfg, "eval.lm_scale_grid=[0, 1]")
    assert cfg["noise"]["p_sub"] == 0.1 and cfg["output_dir"] == "elsewhere"
    assert cfg["eval"]["lm_scale_grid"] == [0, 1]
    with pytest.raises(ValidationError):
        apply_override(cfg, "no-equals-sign")
    with pytest.raises(ValidationError):
        load_config(None, ["topic.text=banner"])


def test_missing_config_exits_nonzero_without_artifacts(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["synth", "-c", str(tmp_path / "nope.json")]) == 1
    assert "config file not found" in capsys.readouterr().err
    assert os.listdir(tmp_path) == []


def test_invalid_config_exits_one(tmp_path):
    path = write_config(tmp_path, tmp_path / "run", {"seed": -1})
    assert main(["synth", "-c", path]) == 1
    assert not (tmp_path / "run").exists()


def test_missing_artifact_exits_one(tmp_path, capsys):
    path = write_config(tmp_path, tmp_path / "empty")
    assert main(["train-ngram", "-c", path]) == 1
    assert "missing required artifact" in capsys.readouterr().err


def test_synth_is_byte_identical_across_runs(tmp_path):
    outs = []
    for name in ("a", "b"):
        path = write_config(tmp_path, tmp_path / name)
        assert main(["synth", "-c", path]) == 0
        outs.append(tmp_path / name)
    for f in ("data/train.jsonl", "data/dev.jsonl", "data/test.jsonl", "data/vocab.txt"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_full_tiny_pipeline_writes_artifacts_and_manifests(tiny_run):
    root, _ = tiny_run
    files = tree(root)
    for expected in ("components/index.json", "mixtures/static.json", "mixtures/dynamic-2pass.json",
                     "topic/classifier.npz", "nbest/test.jsonl", "nlm/nlm-avg-derived.npz",
                     "results/perplexity.json", "results/eval.json", "results/report.txt",
                     "manifests/report.json"):
        assert expected in files
    man = json.loads((root / "manifests" / "train-mixture.json").read_text())
    assert set(man) >= {"config_hash", "inputs", "outputs", "versions", "seed"}
    assert all(len(h) == 64 for h in man["outputs"].values())


def test_report_arithmetic(tiny_run):
    root, _ = tiny_run
    doc = json.loads((root / "results" / "eval.json").read_text())
    report = json.loads((root / "results" / "report.json").read_text())
    by_name = {r["name"]: r for r in doc["reports"]}
    base = by_name["static"]
    for row in report["rows"]:
        r = by_name[row["name"]]
        if row["baseline"]:
            assert row["relative_wer"] is None
        else:
            assert row["relative_wer"] == pytest.approx(100 * (r["wer"] - base["wer"]) / base["wer"])
            assert row["relative_eer"] == pytest.approx(100 * (r["eer"] - base["eer"]) / base["eer"])
    text = (root / "results" / "report.txt").read_text()
    assert "static (baseline)" in text and "Rel. WER (%)" in text
    with pytest.raises(ValueError):
        build_report(doc, "missing")
    fake = {"baseline": "a", "reports": [
        {"name": "a", "perplexity": 10.0, "wer": 0.2, "eer": 0.4},
        {"name": "b", "perplexity": 8.0, "wer": 0.15, "eer": 0.3}]}
    rows = build_report(fake)
    assert rows[1]["relative_wer"] == pytest.approx(-25.0)
    assert rows[1]["relative_eer"] == pytest.approx(-25.0)
    assert "-25.00" in report_table(rows)


def test_eval_reports_follow_scorer_order(tiny_run):
    root, _ = tiny_run
    doc = json.loads((root / "results" / "eval.json").read_text())
    names = [r["name"] for r in doc["reports"]]
    assert names == TINY["eval"]["scorers"]
    none = next(r for r in doc["reports"] if r["name"] == "none")
    assert none["lm_scale"] == 0.0


def test_only_restricts_variants(tiny_run):
    root, cfg_path = tiny_run
    before = (root / "adapters" / "dynamic-1pass.npz").read_bytes()
    assert main(["train-adapter", "-c", cfg_path, "--only", "dynamic-1pass"]) == 0
    assert (root / "adapters" / "dynamic-1pass.npz").read_bytes() == before
    man = json.loads((root / "manifests" / "train-adapter.json").read_text())
    assert all("dynamic-1pass" in k for k in man["outputs"])


def test_gradcheck_subcommand_exits_zero():
    proc = subprocess.run([sys.executable, "-m", "ctxlm.cli", "gradcheck"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    lines = proc.stdout.strip().splitlines()
    assert any(line.startswith("nlm[ENCODER_INIT]") for line in lines)
    assert all(line.endswith("ok") for line in lines)


def test_pipeline_is_deterministic(tmp_path):
    cfgs = []
    for name in ("x", "y"):
        cfg = load_config(write_config(tmp_path, tmp_path / name))
        run_pipeline(cfg)
        cfgs.append(tmp_path / name)
    a = (cfgs[0] / "results" / "report.json").read_bytes()
    assert a == (cfgs[1] / "results" / "report.json").read_bytes()

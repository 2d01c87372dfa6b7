import json
import xml.etree.ElementTree as ET

import pytest

from coupled_sampler.cli import main
from coupled_sampler.schedule import build_linear, schedule_to_json


SCHEDULE = {"num_steps": 60, "beta_start": 1e-3, "beta_end": 0.2}


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def sample_config(**extra):
    doc = {"model": "std-normal-2d", "schedule": dict(SCHEDULE), "n": 64, "seed": 5}
    doc.update(extra)
    return doc


def couple_config(**extra):
    doc = {
        "pair": "separated-pair",
        "schedule": dict(SCHEDULE),
        "coupling": {"lambda": 1.0},
        "n": 64,
        "seed": 5,
    }
    doc.update(extra)
    return doc


class TestSampleCommand:
    def test_minimal_run_emits_files(self, tmp_path):
        cfg = write_config(tmp_path, sample_config(svg=True))
        out = tmp_path / "out"
        assert main(["sample", "--config", cfg, "--out", str(out)]) == 0
        assert (out / "samples.csv").exists()
        metrics = json.loads((out / "metrics.json").read_text())
        names = {m["name"]: m for m in metrics}
        assert names["energy-distance"]["passed"] is True
        run = json.loads((out / "run.json").read_text())
        assert run["seed"] == 5 and len(run["fingerprint"]) == 16
        header = (out / "samples.csv").read_text().splitlines()[0]
        assert header == "chain_index,dim_0,dim_1"
        ET.parse(out / "scatter.svg")

    def test_rerun_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, sample_config())
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["sample", "--config", cfg, "--out", str(out_a)]) == 0
        assert main(["sample", "--config", cfg, "--out", str(out_b)]) == 0
        for name in ("samples.csv", "metrics.json", "run.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path, sample_config(**{"lambda": -1.0}))
        assert main(["sample", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "lambda" in capsys.readouterr().err

    def test_invalid_values_rejected(self, tmp_path, capsys):
        bad = sample_config()
        bad["n"] = 0
        cfg = write_config(tmp_path, bad)
        assert main(["sample", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "n" in capsys.readouterr().err

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = write_config(tmp_path, sample_config())
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        main(["sample", "--config", cfg, "--out", str(out_a)])
        main(["sample", "--config", cfg, "--seed", "6", "--out", str(out_b)])
        assert (out_a / "samples.csv").read_bytes() != (out_b / "samples.csv").read_bytes()

    def test_trajectory_emitted_when_recorded(self, tmp_path):
        doc = sample_config(sampler={"record_trajectory": True}, n=4)
        cfg = write_config(tmp_path, doc)
        out = tmp_path / "out"
        assert main(["sample", "--config", cfg, "--out", str(out)]) == 0
        lines = (out / "trajectory.csv").read_text().splitlines()
        assert lines[0].startswith("chain_index,step,x_0")
        assert len(lines) == 1 + 4 * 60

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["sample", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")]) == 2


class TestCoupleCommand:
    def test_pair_preset_run(self, tmp_path):
        cfg = write_config(tmp_path, couple_config(svg=True))
        out = tmp_path / "out"
        assert main(["couple", "--config", cfg, "--out", str(out)]) == 0
        for name in ("samples_a.csv", "samples_b.csv", "coupling_trace.csv",
                     "metrics.json", "run.json", "paired_scatter.svg"):
            assert (out / name).exists()
        metrics = {m["name"]: m for m in json.loads((out / "metrics.json").read_text())}
        assert metrics["coupling-median-vs-lambda0-reference"]["passed"] is True
        trace = (out / "coupling_trace.csv").read_text().splitlines()
        assert trace[0] == "step,mean_distance"
        assert len(trace) == 1 + 60

    def test_scene_preset_reports_residuals(self, tmp_path):
        doc = couple_config()
        del doc["pair"]
        doc["scene"] = "mv-triangle"
        cfg = write_config(tmp_path, doc)
        out = tmp_path / "out"
        assert main(["couple", "--config", cfg, "--out", str(out)]) == 0
        names = {m["name"] for m in json.loads((out / "metrics.json").read_text())}
        assert {"consistency-residual-a", "consistency-residual-b"} <= names

    def test_lambda_zero_reduces_to_sample_runs(self, tmp_path):
        from coupled_sampler.rng import CHAIN_A, CHAIN_B, derive_seed

        doc = couple_config()
        doc["coupling"]["lambda"] = 0.0
        cfg = write_config(tmp_path, doc)
        out = tmp_path / "couple"
        assert main(["couple", "--config", cfg, "--out", str(out)]) == 0

        for chain, label, preset in ((CHAIN_A, "a", "gauss-left"),
                                     (CHAIN_B, "b", "gauss-right")):
            solo_doc = sample_config(model=preset)
            solo_doc["seed"] = derive_seed(5, chain)
            solo_cfg = write_config(tmp_path, solo_doc, name=f"solo_{label}.json")
            solo_out = tmp_path / f"solo_{label}"
            assert main(["sample", "--config", solo_cfg, "--out", str(solo_out)]) == 0
            coupled = (out / f"samples_{label}.csv").read_text()
            assert coupled == (solo_out / "samples.csv").read_text()

    def test_dimension_mismatch_rejected(self, tmp_path, capsys):
        doc = couple_config()
        del doc["pair"]
        doc["model_a"] = "std-normal-2d"
        doc["model_b"] = "ring-2c-4d"
        cfg = write_config(tmp_path, doc)
        assert main(["couple", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "dimension" in capsys.readouterr().err

    def test_exactly_one_model_source(self, tmp_path):
        doc = couple_config()
        doc["scene"] = "mv-triangle"
        cfg = write_config(tmp_path, doc)
        assert main(["couple", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


class TestSweepCommand:
    def test_grid_run(self, tmp_path):
        doc = couple_config(lambda_grid=[0.0, 0.5, 1.0, 2.0])
        del doc["coupling"]
        cfg = write_config(tmp_path, doc)
        out = tmp_path / "out"
        assert main(["sweep", "--config", cfg, "--out", str(out)]) == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "lambda,coupling_median,nll_a,nll_b,residual_b"
        assert len(lines) == 5
        metrics = {m["name"]: m for m in json.loads((out / "metrics.json").read_text())}
        assert metrics["sweep-distance-non-increasing"]["passed"] is True
        ET.parse(out / "sweep.svg")

    def test_single_point_grid_rejected(self, tmp_path, capsys):
        doc = couple_config(lambda_grid=[1.0])
        del doc["coupling"]
        cfg = write_config(tmp_path, doc)
        assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "lambda_grid" in capsys.readouterr().err

    def test_lambda_key_not_allowed_in_sweep_coupling(self, tmp_path, capsys):
        doc = couple_config(lambda_grid=[0.0, 1.0, 2.0])
        cfg = write_config(tmp_path, doc)  # coupling still has "lambda"
        assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "lambda" in capsys.readouterr().err

    def test_rerun_identical(self, tmp_path):
        doc = couple_config(lambda_grid=[0.0, 0.5, 1.0])
        del doc["coupling"]
        cfg = write_config(tmp_path, doc)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["sweep", "--config", cfg, "--out", str(out_a)]) == 0
        assert main(["sweep", "--config", cfg, "--out", str(out_b)]) == 0
        assert (out_a / "sweep.csv").read_bytes() == (out_b / "sweep.csv").read_bytes()


class TestScheduleCommand:
    def test_build_prints_schedule(self, capsys):
        assert main(["schedule", "build", "--num-steps", "5",
                     "--beta-start", "0.1", "--beta-end", "0.3"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["num_steps"] == 5
        assert len(doc["beta"]) == 5

    def test_convert_sigma(self, capsys):
        assert main(["schedule", "convert", "--source", "sigma",
                     "--values", "0,1,3"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["alpha_bar"] == pytest.approx([1.0, 0.5, 0.1])

    def test_convert_flow_time(self, capsys):
        assert main(["schedule", "convert", "--source", "flow-time",
                     "--values", "0.5,1"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["alpha_bar"] == pytest.approx([0.5, 1.0])

    def test_convert_rejects_bad_values(self, capsys):
        assert main(["schedule", "convert", "--source", "sigma",
                     "--values", "-1"]) == 2

    def test_align(self, tmp_path, capsys):
        src = tmp_path / "src.json"
        tgt = tmp_path / "tgt.json"
        src.write_text(schedule_to_json(build_linear(10, 0.01, 0.2)))
        tgt.write_text(schedule_to_json(build_linear(20, 0.005, 0.25)))
        assert main(["schedule", "align", "--source", str(src),
                     "--target", str(tgt)]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["source_steps"] == 10
        targets = [t for _, t in doc["mapping"]]
        assert all(b >= a for a, b in zip(targets, targets[1:]))

    def test_align_missing_file(self, tmp_path):
        src = tmp_path / "src.json"
        src.write_text(schedule_to_json(build_linear(5, 0.1, 0.2)))
        assert main(["schedule", "align", "--source", str(src),
                     "--target", str(tmp_path / "nope.json")]) == 2


class TestVerifyCommand:
    def test_pristine_build_exits_zero(self, capsys):
        assert main(["verify"]) == 0
        out = capsys.readouterr().out
        assert "verify: OK" in out
        assert "flow-duality" in out

    def test_invalid_guidance_rule_env_exits_2(self, monkeypatch, capsys):
        monkeypatch.setenv("COUPLED_SAMPLER_VERIFY_GUIDANCE_RULE", "bogus")
        assert main(["verify"]) == 2
        assert "guidance_scale_rule" in capsys.readouterr().err


class TestSvgLimits:
    def test_pair_scatter_under_two_megabytes_at_8192(self, tmp_path):
        doc = couple_config(n=8192, svg=True)
        doc["schedule"] = {"num_steps": 5, "beta_start": 0.05, "beta_end": 0.3}
        cfg = write_config(tmp_path, doc)
        out = tmp_path / "out"
        assert main(["couple", "--config", cfg, "--out", str(out)]) == 0
        svg = out / "paired_scatter.svg"
        assert svg.stat().st_size < 2 * 1024 * 1024
        ET.parse(svg)


def test_preset_dir_env_override(tmp_path, monkeypatch, capsys):
    preset = {"kind": "gmm", "weights": [1.0], "means": [[0.0]],
              "covariances": [[[1.0]]]}
    (tmp_path / "custom-1d.json").write_text(json.dumps(preset))
    monkeypatch.setenv("COUPLED_SAMPLER_PRESETS", str(tmp_path))
    doc = {"model": "custom-1d", "schedule": {"num_steps": 10, "beta_start": 0.01,
                                              "beta_end": 0.2}, "n": 16, "seed": 1}
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "out"
    assert main(["sample", "--config", cfg, "--out", str(out)]) == 0
    header = (out / "samples.csv").read_text().splitlines()[0]
    assert header == "chain_index,dim_0"

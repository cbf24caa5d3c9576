import csv
import json

import pytest

from mmshap.cli import main

TINY = {
    "n_patients": 120,
    "prevalence": 0.2,
    "vitals_min_length": 40,
    "vitals_max_length": 80,
    "protocol": "split",
    "max_epochs": 4,
    "patience": 3,
}


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps({**TINY, "cohort_dir": "cohort", "processed_dir": "proc", "model_dir": "model"}))
    assert run("generate", "--config", cfg, "--seed", 11, "--out", root / "cohort") == 0
    assert run("preprocess", "--config", cfg, "--out", root / "proc") == 0
    assert run("train", "--config", cfg, "--seed", 11, "--out", root / "model") == 0
    return root, cfg


def first_id(root):
    with open(root / "proc" / "labels.csv") as fh:
        return next(csv.DictReader(fh))["patient_id"]


class TestPipeline:
    def test_generate_writes_manifest(self, pipeline):
        root, _ = pipeline
        manifest = json.loads((root / "cohort" / "manifest.json").read_text())
        assert manifest["n_records"] == 120
        assert manifest["config"]["seed"] == 11
        assert "out" not in manifest["config"]

    def test_train_outputs(self, pipeline):
        root, _ = pipeline
        with open(root / "model" / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["model"] for r in rows] == ["Pre-Static", "Pre-Hip", "Pre-Chest", "Per-Vitals", "Pre", "Per", "All"]
        assert {"auc_mean", "auc_sd", "recall_mean", "precision_mean", "f1_mean"} <= set(rows[0])
        split = json.loads((root / "model" / "split.json").read_text())
        assert set(split) == {"train", "val", "test"}
        assert (root / "model" / "bundle" / "All" / "manifest.json").exists()

    def test_train_refuses_overwrite(self, pipeline, capsys):
        root, cfg = pipeline
        assert run("train", "--config", cfg, "--out", root / "model") == 1
        assert "--force" in capsys.readouterr().err

    def test_local_explanation_adds_up(self, pipeline):
        root, cfg = pipeline
        case = first_id(root)
        assert run("explain", "--config", cfg, "--case", case, "--samples", 16, "--out", root / "local") == 0
        doc = json.loads((root / "local" / f"report_{case}.json").read_text())
        total = sum(m["ac"] for m in doc["modalities"])
        assert total == pytest.approx(doc["prediction"] - doc["base_value"], abs=1e-9)
        assert len(doc["static_features"]) == 76
        plot = json.loads((root / "local" / f"plot_{case}.json").read_text())
        assert len(plot["modality_waterfall"]) == 5

    def test_modes_differ_only_in_static_features(self, pipeline):
        root, cfg = pipeline
        case = first_id(root)
        docs = []
        for mode in ("paper", "conserving"):
            out = root / f"mode_{mode}"
            assert run("explain", "--config", cfg, "--case", case, "--samples", 16, "--mode", mode, "--out", out) == 0
            docs.append(json.loads((out / f"report_{case}.json").read_text()))
        for d in docs:
            d.pop("mode")
        sa, sb = docs[0].pop("static_features"), docs[1].pop("static_features")
        assert docs[0] == docs[1]
        assert sa != sb

    def test_global_explanation(self, pipeline):
        root, cfg = pipeline
        assert run("explain", "--config", cfg, "--global", "--samples", 4, "--background", 8, "--out", root / "glob") == 0
        with open(root / "glob" / "global.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["modality"] for r in rows] == ["static", "hip", "chest", "vitals", "med"]
        assert sum(float(r["rc_mean"]) for r in rows) == pytest.approx(1.0, abs=1e-5)

    def test_eval_and_report(self, pipeline):
        root, cfg = pipeline
        assert run("eval", "--config", cfg, "--out", root / "eval") == 0
        assert (root / "eval" / "predictions.csv").exists()
        run("explain", "--config", cfg, "--global", "--samples", 4, "--background", 8, "--out", root / "g2")
        assert run("report", "--config", cfg, "--explained", root / "g2", "--out", root / "report") == 0
        text = (root / "report" / "report.md").read_text()
        assert "| All |" in text and "| static |" in text

    def test_unknown_case(self, pipeline):
        root, cfg = pipeline
        assert run("explain", "--config", cfg, "--case", "nobody", "--out", root / "x") == 2


class TestDeterminism:
    @pytest.mark.parametrize("command,extra", [
        ("generate", []),
        ("preprocess", []),
        ("train", []),
        ("eval", []),
        ("explain", ["--global", "--samples", 4, "--background", 8]),
    ])
    def test_repeat_is_byte_identical(self, pipeline, command, extra):
        root, cfg = pipeline
        outs = [root / f"rep_{command}_{i}" for i in range(2)]
        for out in outs:
            assert run(command, "--config", cfg, "--seed", 11, *extra, "--out", out) == 0
        files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
        assert files
        for rel in files:
            assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel


class TestErrors:
    def test_invalid_prevalence(self, tmp_path, capsys):
        assert run("generate", "--prevalence", 1.5, "--out", tmp_path) == 2
        assert "prevalence" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run("generate", "--bogus")
        assert exc.value.code == 1

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"colour": "blue"}')
        assert run("generate", "--config", cfg, "--out", tmp_path / "o") == 1

    def test_missing_output(self):
        assert run("generate") == 1

    def test_explain_needs_a_target(self, tmp_path):
        assert run("explain", "--processed", tmp_path, "--model", tmp_path, "--out", tmp_path) == 1

    def test_missing_input_is_data_error(self, tmp_path):
        assert run("preprocess", "--cohort", tmp_path / "nothing", "--out", tmp_path / "o") == 2

    def test_wrong_value_type(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"knn_k": "ten"}')
        assert run("preprocess", "--config", cfg, "--out", tmp_path / "o") == 1

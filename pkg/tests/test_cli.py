import json
import subprocess
import sys

import pytest
import yaml

from conftest import tiny_doc
from lungsound.cli import VERBS, main


@pytest.fixture
def config_file(tiny_corpus, tmp_path):
    root, manifest = tiny_corpus
    doc = tiny_doc(root, manifest)
    doc["experiment"]["output_dir"] = str(tmp_path / "runs")
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


class TestVerbs:
    def test_help_lists_every_verb(self):
        out = subprocess.run([sys.executable, "-m", "lungsound", "--help"], capture_output=True, text=True)
        assert out.returncode == 0
        for verb in VERBS:
            assert verb in out.stdout

    def test_ingest(self, config_file, tmp_path, capsys):
        assert main(["ingest", "--config", str(config_file), "--out", str(tmp_path / "m.csv")]) == 0
        assert "40 recordings" in capsys.readouterr().out
        assert (tmp_path / "m.csv").exists()

    def test_calibrate_and_features(self, config_file, tmp_path):
        assert main(["calibrate-spectrum", "--config", str(config_file), "--out", str(tmp_path / "c.json")]) == 0
        assert json.loads((tmp_path / "c.json").read_text())["config_hash"]
        assert main(["features", "--config", str(config_file), "--out", str(tmp_path / "f.npz")]) == 0
        assert (tmp_path / "f.npz").exists()

    def test_train_evaluate_export_plot(self, config_file, tmp_path, capsys):
        assert main(["train", "--config", str(config_file)]) == 0
        ckpt = tmp_path / "runs" / "ckpt_vanilla_r18_f0_run0.pt"
        capsys.readouterr()
        assert main(["evaluate", "--config", str(config_file), "--checkpoint", str(ckpt)]) == 0
        report = json.loads(capsys.readouterr().out)
        assert 0.0 <= report["AS"] <= 1.0
        emb = tmp_path / "emb.csv"
        assert main(["export-embeddings", "--config", str(config_file), "--checkpoint", str(ckpt),
                     "--out", str(emb)]) == 0
        assert emb.exists()
        assert main(["plot", str(tmp_path / "runs" / "results.csv"), "--out", str(tmp_path / "plots")]) == 0
        assert (tmp_path / "plots" / "results_AS.png").exists()


class TestExitCodes:
    def test_unknown_task(self, config_file):
        assert main(["ingest", "--config", str(config_file), "--set", "task=speech"]) == 2

    def test_missing_manifest(self, config_file, tmp_path):
        assert main(["ingest", "--config", str(config_file), "--set", f"data.manifest={tmp_path}/none.csv"]) == 3

    def test_checkpoint_from_other_config(self, config_file, tmp_path):
        assert main(["train", "--config", str(config_file)]) == 0
        ckpt = tmp_path / "runs" / "ckpt_vanilla_r18_f0_run0.pt"
        assert main(["evaluate", "--config", str(config_file), "--set", "train.epochs=3",
                     "--checkpoint", str(ckpt)]) == 3

    def test_divergence(self, config_file):
        assert main(["train", "--config", str(config_file), "--set", "train.lr_backbone=1e30",
                     "--set", "experiment.output_dir=" + str(config_file.parent / "div")]) == 4

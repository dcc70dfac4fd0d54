import csv
import logging

import pytest

from conftest import tiny_doc
from lungsound.config import ExperimentConfig, apply_overrides
from lungsound.errors import CheckpointMismatch, ConfigError
from lungsound.experiment import (
    evaluate,
    export_embeddings,
    load_checkpoint,
    load_corpus,
    load_units,
    make_split,
    prepare_fold,
    read_results,
    run_experiment,
    summary_rows,
)
from lungsound.plots import emit_plots, group_scores


class TestConfig:
    def test_cycle_task_defaults(self):
        cfg = ExperimentConfig.from_dict({"task": "alsc4"})
        assert (cfg.sample_rate, cfg.layout, cfg.segment_spec().overlap_fraction) == (16000, "replicate3", 0.0)

    def test_recording_task_defaults(self):
        cfg = ExperimentConfig.from_dict({"task": "rdc3"})
        assert (cfg.sample_rate, cfg.layout, cfg.segment_spec().overlap_fraction) == (4000, "rgb_upscaled2x", 0.5)

    def test_overrides_parse_scalars(self):
        doc = apply_overrides({}, ["train.epochs=10", "speccorr.clip=null", "experiment.modes=[vanilla]"])
        assert doc == {"train": {"epochs": 10}, "speccorr": {"clip": None}, "experiment": {"modes": ["vanilla"]}}

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["train.epochs"])

    @pytest.mark.parametrize("doc", [{"task": "speech"}, {"train": {"mode": "mixup"}},
                                     {"data": {"kind": "zip"}}, {"backbone": {"depth": 7}}])
    def test_invalid(self, doc):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(doc)

    def test_digest_ignores_experiment_section(self):
        a = ExperimentConfig.from_dict({"experiment": {"n_runs": 1}})
        b = ExperimentConfig.from_dict({"experiment": {"n_runs": 5, "output_dir": "x"}})
        c = ExperimentConfig.from_dict({"train": {"epochs": 3}})
        assert a.digest() == b.digest() != c.digest()

    def test_file_round_trip(self, tmp_path):
        cfg = ExperimentConfig.from_dict({"task": "rdc2", "train": {"lambda": 0.5}})
        (tmp_path / "c.yaml").write_text(cfg.dump())
        back = ExperimentConfig.load(tmp_path / "c.yaml", ["train.epochs=2"])
        assert back.task == "rdc2" and back.train_config().lam == 0.5 and back.train_config().epochs == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "none.yaml")


@pytest.fixture(scope="module")
def tiny_run(tiny_corpus, tmp_path_factory):
    root, manifest = tiny_corpus
    out = tmp_path_factory.mktemp("run")
    cfg = ExperimentConfig.from_dict(tiny_doc(root, manifest, ("vanilla", "stochnorm")))
    return cfg, out, run_experiment(cfg, out)


class TestRunExperiment:
    def test_outputs(self, tiny_run):
        cfg, out, rows = tiny_run
        assert [r["mode"] for r in rows] == ["vanilla", "stochnorm"]
        for name in ("config.yaml", "results.csv", "summary.csv", "speccorr_fold0.json",
                     "ckpt_vanilla_r18_f0_run0.pt", "history_stochnorm_r18_f0_run0.csv"):
            assert (out / name).exists(), name
        assert len(summary_rows(rows)) == 2

    def test_deterministic(self, tiny_run, tmp_path):
        cfg, _, rows = tiny_run
        assert run_experiment(cfg, tmp_path) == rows

    def test_resume_skips_finished(self, tiny_run):
        cfg, out, rows = tiny_run
        assert run_experiment(cfg, out) == rows
        assert len(read_results(out / "results.csv")) == 2

    def test_checkpoint_reproduces_row(self, tiny_run):
        cfg, out, rows = tiny_run
        recordings, folds = load_corpus(cfg)
        plan = make_split(cfg, recordings, folds)
        model, ckpt = load_checkpoint(out / "ckpt_vanilla_r18_f0_run0.pt", cfg, plan)
        data = prepare_fold(cfg, load_units(cfg, recordings), plan, ckpt["fold"])
        report = evaluate(model, data, cfg.task)
        assert float(rows[0]["AS"]) == pytest.approx(report.AS, abs=1e-12)

    def test_checkpoint_config_mismatch(self, tiny_run):
        cfg, out, _ = tiny_run
        other = ExperimentConfig.from_dict({**cfg.doc, "train": {**cfg["train"], "epochs": 2}})
        with pytest.raises(CheckpointMismatch):
            load_checkpoint(out / "ckpt_vanilla_r18_f0_run0.pt", other)

    def test_cotuning_needs_source_head(self, tiny_corpus, tmp_path):
        root, manifest = tiny_corpus
        cfg = ExperimentConfig.from_dict(tiny_doc(root, manifest, ("cotuning",)))
        with pytest.raises(ConfigError):
            run_experiment(cfg, tmp_path)


class TestEmbeddings:
    def test_rows_and_determinism(self, tiny_run, tmp_path):
        cfg, out, rows = tiny_run
        ckpt = out / "ckpt_vanilla_r18_f0_run0.pt"
        n = export_embeddings(ckpt, cfg, "test", tmp_path / "a.csv")
        export_embeddings(ckpt, cfg, "test", tmp_path / "b.csv")
        assert n == int(rows[0]["n_units"])
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        with (tmp_path / "a.csv").open() as fh:
            table = list(csv.reader(fh))
        assert len(table) == n + 1
        assert len(table[0]) == 2 + 32   # ResNet18 pooled dim at base width 4

    def test_segment_level(self, tiny_run, tmp_path):
        cfg, out, _ = tiny_run
        n = export_embeddings(out / "ckpt_vanilla_r18_f0_run0.pt", cfg, "test", tmp_path / "s.csv", "segment")
        assert n >= 1


def _rows(modes, depths):
    return [{"mode": m, "depth": d, "AS": 0.5 + 0.01 * i} for i, (m, d) in
            enumerate((m, d) for m in modes for d in depths)]


class TestPlots:
    def _bars(self, monkeypatch, rows, tmp_path):
        from matplotlib.container import BarContainer
        from matplotlib.figure import Figure
        counts = []
        original = Figure.savefig

        def spy(fig, *a, **k):
            counts.append(sum(len(c) for c in fig.axes[0].containers if isinstance(c, BarContainer)))
            return original(fig, *a, **k)

        monkeypatch.setattr(Figure, "savefig", spy)
        files = emit_plots(rows, tmp_path)
        return files, counts

    def test_empty_table(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            assert emit_plots([], tmp_path) == []
        assert list(tmp_path.iterdir()) == []
        assert "empty" in caplog.text

    def test_single_bar(self, tmp_path, monkeypatch):
        files, counts = self._bars(monkeypatch, _rows(["vanilla"], [18]), tmp_path)
        assert counts == [1] and files[0].exists()

    def test_sixteen_bars(self, tmp_path, monkeypatch):
        modes = ["vanilla", "cotuning", "stochnorm", "cotuning_stochnorm"]
        files, counts = self._bars(monkeypatch, _rows(modes, [18, 50, 101, 152]), tmp_path)
        assert counts == [16] and files[0].name == "comparison_AS.png"

    def test_group_scores(self):
        rows = [{"mode": "a", "depth": 18, "AS": v} for v in (0.4, 0.6)]
        assert group_scores(rows) == {("a", "18"): (0.5, pytest.approx(0.1), 2)}

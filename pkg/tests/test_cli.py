"""End-to-end command-line tests, driven through main() for speed.

A module-scoped pipeline fixture generates one corpus and one training run
that later commands (embed, probe, metrics) reuse.
"""

import json

import numpy as np
import pytest

from pulseprint.checkpoint import load_checkpoint, save_checkpoint
from pulseprint.cli import main
from pulseprint.probing import EmbeddingTable, load_embeddings, read_report, save_embeddings
from pulseprint.training import read_metrics

CONFIG_DOC = {
    "corpus": {"n_participants": 20, "segments_per_participant": 4,
               "segment_seconds": 2.0, "seed": 5},
    "encoder": {"preset": "tiny", "in_channels": 4},
    "train": {"batch_pairs": 8, "epochs": 2, "seed": 0},
    "eval": {"targets": [["pseudo_age", "regression"],
                         ["pseudo_bmi", "regression"]]},
}


def write_config(path, **overrides):
    doc = {k: dict(v) for k, v in CONFIG_DOC.items()}
    for section, fields in overrides.items():
        doc.setdefault(section, {}).update(fields)
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "run.json")
    assert main(["gen-corpus", "--config", cfg, "--out", str(root / "corpus")]) == 0
    assert main(["pretrain", "--config", cfg, "--corpus", str(root / "corpus"),
                 "--out", str(root / "run")]) == 0
    assert main(["embed", "--config", cfg, "--corpus", str(root / "corpus"),
                 "--checkpoint", str(root / "run" / "checkpoint_final"),
                 "--out", str(root / "emb")]) == 0
    return root, cfg


class TestGenCorpus:
    def test_writes_manifest_and_echo(self, pipeline):
        root, _ = pipeline
        assert (root / "corpus" / "manifest.json").exists()
        assert (root / "corpus" / "resolved_config.json").exists()

    def test_same_config_reproduces_checksums(self, pipeline, tmp_path):
        root, cfg = pipeline
        assert main(["gen-corpus", "--config", cfg,
                     "--out", str(tmp_path / "again")]) == 0
        assert ((root / "corpus" / "manifest.json").read_bytes()
                == (tmp_path / "again" / "manifest.json").read_bytes())

    def test_too_few_participants_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.json",
                           corpus={"n_participants": 5})
        assert main(["gen-corpus", "--config", cfg,
                     "--out", str(tmp_path / "out")]) == 2
        assert "at least 10 participants" in capsys.readouterr().err

    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        path = tmp_path / "typo.json"
        path.write_text(json.dumps({"trian": {}}))
        assert main(["gen-corpus", "--config", str(path),
                     "--out", str(tmp_path / "out")]) == 2
        assert "unknown keys" in capsys.readouterr().err


class TestPretrain:
    def test_outputs(self, pipeline):
        root, _ = pipeline
        records = read_metrics(root / "run" / "metrics.csv")
        assert [r.epoch for r in records] == [0, 1]
        assert (root / "run" / "checkpoint_final").exists()
        assert (root / "run" / "resolved_config.json").exists()
        assert (root / "run" / "training_curves.png").exists()

    def test_no_figures_flag(self, pipeline, tmp_path):
        root, cfg = pipeline
        assert main(["pretrain", "--config", cfg,
                     "--corpus", str(root / "corpus"),
                     "--out", str(tmp_path / "plain"), "--no-figures"]) == 0
        assert not (tmp_path / "plain" / "training_curves.png").exists()

    def test_resume_continues_epoch_numbering(self, pipeline, tmp_path):
        root, _ = pipeline
        out = tmp_path / "resumed"
        cfg2 = write_config(tmp_path / "short.json", train={"epochs": 2})
        assert main(["pretrain", "--config", cfg2,
                     "--corpus", str(root / "corpus"), "--out", str(out)]) == 0
        cfg4 = write_config(tmp_path / "long.json",
                            train={"epochs": 4,
                                   "schedule": {"step_epochs": 1}})
        assert main(["pretrain", "--config", cfg4,
                     "--corpus", str(root / "corpus"), "--out", str(out),
                     "--resume", str(out / "checkpoint_final")]) == 0
        assert [r.epoch for r in read_metrics(out / "metrics.csv")] == [0, 1, 2, 3]

    def test_byol_default_lr_echoed(self, pipeline, tmp_path):
        root, _ = pipeline
        cfg = write_config(tmp_path / "byol.json",
                           train={"framework": "byol", "epochs": 1})
        out = tmp_path / "byol_run"
        assert main(["pretrain", "--config", cfg,
                     "--corpus", str(root / "corpus"), "--out", str(out),
                     "--no-figures"]) == 0
        echoed = json.loads((out / "resolved_config.json").read_text())
        assert echoed["train"]["lr"] == 0.00025

    def test_divergence_exits_3_and_keeps_checkpoint(self, pipeline, tmp_path,
                                                     capsys):
        root, cfg = pipeline
        out = tmp_path / "diverge"
        assert main(["pretrain", "--config", cfg,
                     "--corpus", str(root / "corpus"), "--out", str(out),
                     "--no-figures"]) == 0
        good = (out / "checkpoint_final" / "weights.bin").read_bytes()

        poisoned = tmp_path / "poisoned"
        tensors, meta = load_checkpoint(out / "checkpoint_final")
        name = "online.encoder.params.stem.w"
        tensors[name] = np.full_like(tensors[name], np.nan)
        meta["epoch"] = 1  # pretend one epoch remains
        save_checkpoint(poisoned, tensors, meta)

        assert main(["pretrain", "--config", cfg,
                     "--corpus", str(root / "corpus"), "--out", str(out),
                     "--resume", str(poisoned), "--no-figures"]) == 3
        assert "retained" in capsys.readouterr().err
        assert (out / "checkpoint_final" / "weights.bin").read_bytes() == good


class TestEmbedProbeMetrics:
    def test_embed_output_loads(self, pipeline):
        root, _ = pipeline
        table = load_embeddings(root / "emb")
        assert table.embeddings.shape == (80, 16)

    def test_embed_missing_checkpoint_exits_2(self, pipeline, tmp_path):
        root, cfg = pipeline
        assert main(["embed", "--config", cfg,
                     "--corpus", str(root / "corpus"),
                     "--checkpoint", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "emb")]) == 2

    def test_embed_probe_pipeline_reproducible(self, pipeline, tmp_path):
        root, cfg = pipeline
        for name in ("x", "y"):
            assert main(["embed", "--config", cfg,
                         "--corpus", str(root / "corpus"),
                         "--checkpoint", str(root / "run" / "checkpoint_final"),
                         "--out", str(tmp_path / name)]) == 0
            assert main(["probe", "--config", cfg,
                         "--corpus", str(root / "corpus"),
                         "--embeddings", str(tmp_path / name),
                         "--out", str(tmp_path / f"{name}_probe"),
                         "--no-figures"]) == 0
        assert ((tmp_path / "x" / "embeddings.bin").read_bytes()
                == (tmp_path / "y" / "embeddings.bin").read_bytes())
        assert ((tmp_path / "x_probe" / "probe_report.csv").read_bytes()
                == (tmp_path / "y_probe" / "probe_report.csv").read_bytes())

    def test_probe_report_and_figure(self, pipeline, tmp_path):
        root, cfg = pipeline
        out = tmp_path / "probe"
        assert main(["probe", "--config", cfg,
                     "--corpus", str(root / "corpus"),
                     "--embeddings", str(root / "emb"),
                     "--out", str(out)]) == 0
        rows = read_report(out / "probe_report.csv")
        assert {r["metric"] for r in rows} == {"mae"}
        assert (out / "probe_summary.png").exists()

    def test_probe_single_class_split_exits_2(self, pipeline, tmp_path, capsys):
        root, cfg = pipeline
        # corpus seed 3 puts only one pseudo_sex class into the test split
        skew_cfg = write_config(tmp_path / "skew.json", corpus={"seed": 3},
                                eval={"targets": [["pseudo_sex",
                                                   "classification"]]})
        assert main(["gen-corpus", "--config", skew_cfg,
                     "--out", str(tmp_path / "corpus3")]) == 0
        assert main(["embed", "--config", skew_cfg,
                     "--corpus", str(tmp_path / "corpus3"),
                     "--checkpoint", str(root / "run" / "checkpoint_final"),
                     "--out", str(tmp_path / "emb3")]) == 0
        assert main(["probe", "--config", skew_cfg,
                     "--corpus", str(tmp_path / "corpus3"),
                     "--embeddings", str(tmp_path / "emb3"),
                     "--out", str(tmp_path / "probe3")]) == 2
        assert "both classes" in capsys.readouterr().err

    def test_metrics_report(self, pipeline, tmp_path):
        root, cfg = pipeline
        out = tmp_path / "metrics"
        assert main(["metrics", "--config", cfg,
                     "--embeddings", str(root / "emb"),
                     "--out", str(out)]) == 0
        rows = {r["metric"]: r for r in read_report(out / "metrics_report.csv")}
        assert set(rows) == {"effective_rank", "ser_batch", "dispersion_mean"}
        assert float(rows["effective_rank"]["value"]) > 1.0
        assert (out / "dispersion_histogram.png").exists()

    def test_metrics_on_collapsed_embeddings_reports_rank_one(self, pipeline,
                                                              tmp_path):
        _, cfg = pipeline
        n = 40
        table = EmbeddingTable(
            np.arange(n), np.repeat(np.arange(10), 4),
            np.array(["val"] * n),
            np.ones((n, 16), dtype=np.float32) * 0.5)
        save_embeddings(table, tmp_path / "flat")
        out = tmp_path / "flat_metrics"
        assert main(["metrics", "--config", cfg,
                     "--embeddings", str(tmp_path / "flat"),
                     "--out", str(out), "--no-figures"]) == 0
        rows = {r["metric"]: float(r["value"])
                for r in read_report(out / "metrics_report.csv")}
        assert rows["effective_rank"] == pytest.approx(1.0, abs=1e-6)


class TestAblate:
    def test_suite_runs_and_renders(self, pipeline, tmp_path):
        _, cfg = pipeline
        out = tmp_path / "abl"
        assert main(["ablate", "--suite", "positive-pairs", "--config", cfg,
                     "--out", str(out), "--seeds", "1"]) == 0
        assert (out / "ablation.csv").exists()
        assert (out / "participant_seed0" / "metrics.csv").exists()
        # regression-only eval targets produce no AUC rows, so the AUC
        # comparison figure is skipped rather than drawn empty
        assert not (out / "pseudo_age_classification_auc.png").exists()

    def test_bad_suite_rejected_by_parser(self, pipeline, tmp_path):
        _, cfg = pipeline
        with pytest.raises(SystemExit):
            main(["ablate", "--suite", "nope", "--config", cfg,
                  "--out", str(tmp_path / "x")])

"""Ablation suite expansion and execution tests.

Member runs here use a 20-participant two-epoch setup so the whole file
stays fast; ordering claims about real runs live in the acceptance tests.
"""

import pytest

from pulseprint.ablation import (majority_holds, read_ablation_rows,
                                 run_member, run_suite, suite_members,
                                 write_ablation_rows)
from pulseprint.config import parse_run_config

BASE_DOC = {
    "corpus": {"n_participants": 20, "segments_per_participant": 4,
               "segment_seconds": 2.0, "seed": 5},
    "encoder": {"preset": "tiny", "in_channels": 4},
    "train": {"batch_pairs": 8, "epochs": 2, "seed": 0},
    "eval": {"targets": [["pseudo_age", "regression"],
                         ["pseudo_bmi", "regression"]]},
}


@pytest.fixture(scope="module")
def base():
    return parse_run_config(BASE_DOC)


class TestSuiteMembers:
    def test_positive_pairs_variants(self, base):
        members = suite_members("positive-pairs", base, seeds=(0, 1, 2))
        assert len(members) == 6
        assert {(m.variant, m.train_cfg.pair_mode) for m in members} == {
            ("participant", "participant"), ("segment", "segment")}
        assert sorted({m.seed for m in members}) == [0, 1, 2]
        assert all(m.train_cfg.seed == m.seed for m in members)

    def test_frameworks_variants(self, base):
        members = suite_members("frameworks", base, seeds=(0,))
        assert [m.variant for m in members] == ["ours", "ours_no_koleo",
                                                "simclr", "byol"]
        assert all(m.train_cfg.framework == m.variant for m in members)

    def test_augmentations_variants(self, base):
        members = suite_members("augmentations", base, seeds=(0,))
        names = [m.variant for m in members]
        assert names == ["cut_out", "magnitude_warp", "gaussian_noise",
                         "channel_permute", "time_warp", "full"]
        isolated = members[0].policy
        assert len(isolated.entries) == 1
        assert isolated.entries[0].kind == "cut_out"
        assert isolated.entries[0].probability == 1.0
        assert len(members[-1].policy.entries) == 5

    def test_dispersion_variants(self, base):
        members = suite_members("dispersion", base, seeds=(0,))
        jitters = {m.variant: m.corpus_cfg.modality.within_participant_jitter
                   for m in members}
        assert jitters["jitter_high"] == 0.6
        assert jitters["jitter_low"] == pytest.approx(0.2)
        assert all(m.train_cfg.framework == "ours" for m in members)
        assert all(m.measure_infonce for m in members)

    def test_base_config_passed_through(self, base):
        member = suite_members("frameworks", base, seeds=(4,))[0]
        assert member.encoder_cfg is base.encoder_cfg
        assert member.eval_cfg is base.eval
        assert member.train_cfg.batch_pairs == 8
        assert member.train_cfg.epochs == 2

    def test_unknown_suite(self, base):
        with pytest.raises(ValueError, match="suite"):
            suite_members("nope", base)


class TestRunMember:
    def test_rows_cover_training_probes_and_representation(self, base, tmp_path):
        member = suite_members("positive-pairs", base, seeds=(0,))[0]
        rows = run_member(member, tmp_path / "m")
        metrics = {r["metric"] for r in rows}
        assert metrics == {"final_train_loss", "final_val_loss",
                           "pseudo_age_regression_mae",
                           "pseudo_bmi_regression_mae",
                           "effective_rank", "dispersion_mean"}
        assert all(r["suite"] == "positive-pairs" and r["seed"] == 0 and
                   r["variant"] == "participant" for r in rows)

    def test_infonce_row_present_when_requested(self, base, tmp_path):
        member = suite_members("dispersion", base, seeds=(0,))[0]
        rows = run_member(member, tmp_path / "m")
        by_metric = {r["metric"]: r["value"] for r in rows}
        assert "final_val_infonce" in by_metric
        # the pure contrastive objective excludes the (negative) spread term
        assert by_metric["final_val_infonce"] != by_metric["final_val_loss"]

    def test_member_runs_are_reproducible(self, base, tmp_path):
        member = suite_members("frameworks", base, seeds=(1,))[2]
        rows_a = run_member(member, tmp_path / "a")
        rows_b = run_member(member, tmp_path / "b")
        assert rows_a == rows_b


class TestRunSuite:
    def test_outputs_and_round_trip(self, base, tmp_path):
        out = tmp_path / "suite"
        rows = run_suite("positive-pairs", base, out, seeds=(0,))
        assert (out / "ablation.csv").exists()
        assert (out / "resolved_config.json").exists()
        assert (out / "participant_seed0" / "metrics.csv").exists()
        assert (out / "segment_seed0" / "checkpoint_final").exists()
        loaded = read_ablation_rows(out / "ablation.csv")
        assert len(loaded) == len(rows)
        for raw, row in zip(loaded, rows):
            assert raw["variant"] == row["variant"]
            assert float(raw["value"]) == row["value"]

    def test_rerun_is_byte_identical(self, base, tmp_path):
        rows = run_suite("positive-pairs", base, tmp_path / "a", seeds=(0,))
        run_suite("positive-pairs", base, tmp_path / "b", seeds=(0,))
        assert ((tmp_path / "a" / "ablation.csv").read_bytes()
                == (tmp_path / "b" / "ablation.csv").read_bytes())
        assert len(rows) == 12

    def test_parallel_matches_sequential(self, base, tmp_path):
        seq = run_suite("positive-pairs", base, tmp_path / "seq", seeds=(0,))
        par = run_suite("positive-pairs", base, tmp_path / "par", seeds=(0,),
                        parallel=True)
        assert seq == par


class TestMajorityHolds:
    @staticmethod
    def rows(values):
        # values: {variant: [per-seed metric values]}
        out = []
        for variant, series in values.items():
            for seed, value in enumerate(series):
                out.append({"suite": "s", "seed": seed, "variant": variant,
                            "metric": "m", "value": value})
        return out

    def test_two_of_three_wins(self):
        rows = self.rows({"a": [1.0, 2.0, 0.5], "b": [0.5, 1.0, 1.0]})
        assert majority_holds(rows, "m", "a", "b")

    def test_one_of_three_loses(self):
        rows = self.rows({"a": [1.0, 0.5, 0.5], "b": [0.5, 1.0, 1.0]})
        assert not majority_holds(rows, "m", "a", "b")

    def test_lower_is_better_direction(self):
        rows = self.rows({"a": [0.1, 0.2, 0.9], "b": [0.5, 0.5, 0.5]})
        assert majority_holds(rows, "m", "a", "b", higher_is_better=False)

    def test_ties_do_not_count_as_wins(self):
        rows = self.rows({"a": [1.0, 1.0, 2.0], "b": [1.0, 1.0, 1.0]})
        assert not majority_holds(rows, "m", "a", "b")

    def test_missing_variant_raises(self):
        rows = self.rows({"a": [1.0]})
        with pytest.raises(ValueError, match="lacks"):
            majority_holds(rows, "m", "a", "b")

    def test_empty_rows_raise(self):
        with pytest.raises(ValueError, match="no rows"):
            majority_holds([], "m", "a", "b")


class TestRowPersistence:
    def test_write_read_round_trip(self, tmp_path):
        rows = [{"suite": "s", "seed": 0, "variant": "v", "metric": "m",
                 "value": 0.1234567890123}]
        path = tmp_path / "rows.csv"
        write_ablation_rows(rows, path)
        loaded = read_ablation_rows(path)
        assert float(loaded[0]["value"]) == rows[0]["value"]
        assert loaded[0]["seed"] == "0"

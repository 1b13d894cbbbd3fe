"""Embedding export, ridge probing, and report tests.

Ridge solutions are checked against an explicit normal-equations inverse
computed in float64. Probe mechanics run on untrained encoders (the probe
path has no randomness of its own); probe quality is checked through the
generative feature matrix, which upper-bounds any embedding.
"""

import numpy as np
import pytest

from pulseprint.corpus import (Corpus, CorpusConfig, ModalityConfig,
                               generate_corpus, ppg_modality)
from pulseprint.encoder import tiny_encoder, tiny_head
from pulseprint.probing import (DEFAULT_ALPHA_GRID, EmbeddingTable,
                                aggregate_by_participant, binarize_labels,
                                embed_corpus, evaluate_all, load_embeddings,
                                oracle_feature_matrix, participant_folds,
                                probe_matrix, probe_target, read_report,
                                ridge_fit, ridge_predict, save_embeddings,
                                select_alpha, write_report)
from pulseprint.training import TrainConfig, TrainState


@pytest.fixture(scope="module")
def corpus():
    cfg = CorpusConfig(ppg_modality(segment_seconds=2.0), n_participants=30,
                       segments_per_participant=4, seed=2,
                       split_fractions=(0.6, 0.2, 0.2))
    return generate_corpus(cfg)


@pytest.fixture(scope="module")
def big_corpus():
    cfg = CorpusConfig(ppg_modality(segment_seconds=2.0), n_participants=120,
                       segments_per_participant=4, seed=1)
    return generate_corpus(cfg)


@pytest.fixture(scope="module")
def state():
    enc = tiny_encoder(4)
    return TrainState(TrainConfig(batch_pairs=8), enc, tiny_head(enc.embedding_dim))


class TestRidgeFit:
    def test_exact_fit_with_zero_alpha(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(20, 5))
        w_true = rng.normal(size=5)
        y = X @ w_true + 3.0
        w, b = ridge_fit(X, y, alpha=0.0)
        residual = ridge_predict(X, w, b) - y
        assert np.max(np.abs(residual)) < 1e-8

    def test_singular_system_with_zero_alpha_raises(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(10, 3))
        X = np.hstack([X, X[:, :1]])  # duplicated column
        with pytest.raises(ValueError, match="singular"):
            ridge_fit(X, rng.normal(size=10), alpha=0.0)

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(200, 16))
        y = X @ rng.normal(size=16) + rng.normal(size=200)
        alpha = 3.7
        w, b = ridge_fit(X, y, alpha)

        Xc = X - X.mean(axis=0)
        yc = y - y.mean()
        w_oracle = np.linalg.inv(Xc.T @ Xc + alpha * np.eye(16)) @ (Xc.T @ yc)
        assert np.max(np.abs(w - w_oracle)) < 1e-8
        assert b == pytest.approx(y.mean() - X.mean(axis=0) @ w_oracle, abs=1e-8)

    def test_huge_alpha_predicts_the_mean(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(50, 4))
        y = rng.normal(size=50) + 5.0
        w, b = ridge_fit(X, y, alpha=1e12)
        assert np.max(np.abs(w)) < 1e-6
        assert np.max(np.abs(ridge_predict(X, w, b) - y.mean())) < 1e-6

    def test_prediction_invariant_to_shared_feature_shift(self):
        rng = np.random.default_rng(4)
        X_train = rng.normal(size=(40, 6))
        y = rng.normal(size=40)
        X_test = rng.normal(size=(10, 6))
        w1, b1 = ridge_fit(X_train, y, 1.0)
        w2, b2 = ridge_fit(X_train + 7.3, y, 1.0)
        assert np.allclose(ridge_predict(X_test, w1, b1),
                           ridge_predict(X_test + 7.3, w2, b2), atol=1e-8)

    def test_input_validation(self):
        with pytest.raises(ValueError, match="alpha"):
            ridge_fit(np.zeros((4, 2)), np.zeros(4), alpha=-1.0)
        with pytest.raises(ValueError, match="need X"):
            ridge_fit(np.zeros((4, 2)), np.zeros(5), alpha=1.0)


class TestFoldsAndAlpha:
    def test_folds_balanced_and_order_invariant(self):
        pids = np.arange(100, 120)
        folds = participant_folds(pids, 5)
        assert np.bincount(folds).tolist() == [4, 4, 4, 4, 4]
        perm = np.random.default_rng(5).permutation(20)
        assert np.array_equal(participant_folds(pids[perm], 5), folds[perm])

    def test_too_few_folds_raises(self):
        with pytest.raises(ValueError, match="folds"):
            participant_folds(np.arange(10), 1)

    def test_noise_prefers_heavy_regularization(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(25, 10))
        y = rng.normal(size=25)
        assert select_alpha(X, y, np.arange(25)) == 100.0

    def test_clean_signal_prefers_light_regularization(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(60, 4))
        y = X @ np.array([1.0, -2.0, 0.5, 3.0])
        assert select_alpha(X, y, np.arange(60)) == 0.01

    def test_result_comes_from_the_grid(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(20, 3))
        y = rng.normal(size=20)
        grid = (0.5, 2.0)
        assert select_alpha(X, y, np.arange(20), grid=grid) in grid
        with pytest.raises(ValueError, match="grid"):
            select_alpha(X, y, np.arange(20), grid=())


class TestAggregate:
    def _table(self, pids, emb):
        n = len(pids)
        return EmbeddingTable(np.arange(n), np.asarray(pids),
                              np.array(["train"] * n), np.asarray(emb, dtype=np.float32))

    def test_mean_of_identical_rows_is_that_row(self):
        row = np.array([1.5, -2.0, 0.25], dtype=np.float32)
        pids, means = aggregate_by_participant(self._table([7, 7, 7], [row] * 3))
        assert pids.tolist() == [7]
        assert np.allclose(means[0], row, atol=1e-7)

    def test_opposite_rows_cancel(self):
        e = np.array([1.0, -3.0], dtype=np.float32)
        _, means = aggregate_by_participant(self._table([1, 1], [e, -e]))
        assert np.allclose(means[0], 0.0, atol=1e-7)

    def test_one_row_per_distinct_participant_sorted(self):
        rng = np.random.default_rng(9)
        pids = np.array([5, 3, 5, 3, 9, 9])
        table = self._table(pids, rng.normal(size=(6, 4)))
        out_pids, means = aggregate_by_participant(table)
        assert out_pids.tolist() == [3, 5, 9]
        assert means.shape == (3, 4)


class TestEmbedCorpus:
    def test_row_counts_per_split(self, corpus, state):
        assert embed_corpus(state, corpus, "train").embeddings.shape == (72, 16)
        assert embed_corpus(state, corpus, "val").embeddings.shape == (24, 16)
        assert embed_corpus(state, corpus, "all").embeddings.shape == (120, 16)

    def test_deterministic(self, corpus, state):
        a = embed_corpus(state, corpus, "val")
        b = embed_corpus(state, corpus, "val")
        assert np.array_equal(a.embeddings, b.embeddings)
        assert np.array_equal(a.segment_ids, b.segment_ids)

    def test_channel_mismatch_raises(self, corpus):
        enc = tiny_encoder(1)
        single = TrainState(TrainConfig(batch_pairs=8), enc, tiny_head(16))
        with pytest.raises(ValueError, match="channels"):
            embed_corpus(single, corpus, "all")

    def test_zero_jitter_participants_embed_identically(self, state):
        mod = ModalityConfig("ppg", 4, 64.0, 2.0, 0.0)
        quiet = generate_corpus(CorpusConfig(mod, 10, 4, 3))
        table = embed_corpus(state, quiet, "all")
        for p in np.unique(table.participant_ids):
            rows = table.embeddings[table.participant_ids == p]
            spread = np.max(np.abs(rows - rows[0]))
            assert spread < 1e-6


class TestEmbeddingPersistence:
    def test_round_trip(self, corpus, state, tmp_path):
        table = embed_corpus(state, corpus, "all")
        save_embeddings(table, tmp_path / "emb")
        loaded = load_embeddings(tmp_path / "emb")
        assert np.array_equal(loaded.embeddings, table.embeddings)
        assert np.array_equal(loaded.segment_ids, table.segment_ids)
        assert np.array_equal(loaded.participant_ids, table.participant_ids)
        assert loaded.splits.tolist() == table.splits.tolist()

    def test_corrupted_blob_detected(self, corpus, state, tmp_path):
        save_embeddings(embed_corpus(state, corpus, "val"), tmp_path / "emb")
        blob = tmp_path / "emb" / "embeddings.bin"
        raw = bytearray(blob.read_bytes())
        raw[7] ^= 0x55
        blob.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="checksum"):
            load_embeddings(tmp_path / "emb")

    def test_truncation_detected(self, corpus, state, tmp_path):
        save_embeddings(embed_corpus(state, corpus, "val"), tmp_path / "emb")
        blob = tmp_path / "emb" / "embeddings.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(ValueError, match="bytes"):
            load_embeddings(tmp_path / "emb")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(ValueError, match="manifest"):
            load_embeddings(tmp_path / "nope")


class TestBinarize:
    def test_median_split(self):
        values = np.array([1.0, 2.0, 3.0, 4.0, 10.0])
        y, threshold = binarize_labels(values)
        assert threshold == 3.0
        assert y.tolist() == [0, 0, 0, 1, 1]

    def test_binary_passthrough(self):
        y, threshold = binarize_labels(np.array([0.0, 1.0, 1.0, 0.0]))
        assert threshold is None
        assert y.tolist() == [0, 1, 1, 0]


class TestProbes:
    def test_oracle_features_rank_well(self, big_corpus):
        pids, X = oracle_feature_matrix(big_corpus)
        age = probe_matrix(big_corpus, pids, X, "pseudo_age", "classification")
        assert age.auc > 0.9
        assert 0.0 <= age.pauc <= 1.0
        assert age.alpha in DEFAULT_ALPHA_GRID
        assert age.n_train == 96 and age.n_test == 12

    def test_oracle_regression_beats_mean_baseline(self, big_corpus):
        pids, X = oracle_feature_matrix(big_corpus)
        rep = probe_matrix(big_corpus, pids, X, "pseudo_age", "regression")
        test_pids = big_corpus.participants_in_split("test")
        y_test = big_corpus.label_for_participants("pseudo_age", test_pids)
        baseline = np.mean(np.abs(y_test - y_test.mean()))
        assert rep.mae < 0.5 * baseline

    def test_embedding_probe_report_shape(self, corpus, state):
        table = embed_corpus(state, corpus, "all")
        rep = probe_target(table, corpus, "pseudo_age", "classification")
        assert rep.task == "classification"
        assert 0.0 <= rep.auc <= 1.0 and 0.0 <= rep.pauc <= 1.0
        assert rep.mae is None
        assert rep.n_train == 18 and rep.n_test == 6

    def test_fixed_alpha_skips_selection(self, corpus, state):
        table = embed_corpus(state, corpus, "all")
        rep = probe_target(table, corpus, "pseudo_bmi", "regression", alpha=10.0)
        assert rep.alpha == 10.0 and rep.mae >= 0.0

    def test_unknown_task_rejected(self, corpus):
        pids, X = oracle_feature_matrix(corpus)
        with pytest.raises(ValueError, match="task"):
            probe_matrix(corpus, pids, X, "pseudo_age", "ranking")

    def test_single_class_split_rejected(self, corpus):
        ones = dict(corpus.labels)
        sex = np.asarray(ones["pseudo_sex"]).copy()
        test_pids = set(corpus.participants_in_split("test").tolist())
        for i, p in enumerate(ones["participant_id"]):
            if int(p) in test_pids:
                sex[i] = 1.0
        ones["pseudo_sex"] = sex
        doctored = Corpus(corpus.config, corpus.segments, corpus.segment_ids,
                          corpus.participant_ids, corpus.splits, ones)
        pids, X = oracle_feature_matrix(doctored)
        with pytest.raises(ValueError, match="both classes"):
            probe_matrix(doctored, pids, X, "pseudo_sex", "classification")

    def test_split_leak_rejected(self, corpus):
        splits = corpus.splits.copy()
        train_pid = corpus.participants_in_split("train")[0]
        leak_row = np.flatnonzero(corpus.participant_ids == train_pid)[0]
        splits[leak_row] = "test"
        leaky = Corpus(corpus.config, corpus.segments, corpus.segment_ids,
                       corpus.participant_ids, splits, corpus.labels)
        pids, X = oracle_feature_matrix(leaky)
        with pytest.raises(ValueError, match="overlap"):
            probe_matrix(leaky, pids, X, "pseudo_age", "classification")


class TestEvaluateAll:
    def test_report_schema_and_determinism(self, corpus, state, tmp_path):
        rows = evaluate_all(state, corpus)
        keyset = {(r["target"], r["task"], r["metric"]) for r in rows}
        assert ("pseudo_age", "classification", "auc") in keyset
        assert ("pseudo_age", "classification", "pauc") in keyset
        assert ("pseudo_sex", "classification", "auc") in keyset
        assert ("pseudo_age", "regression", "mae") in keyset
        assert ("pseudo_bmi", "regression", "mae") in keyset
        assert ("embeddings", "representation", "effective_rank") in keyset
        assert ("embeddings", "representation", "dispersion_mean") in keyset

        write_report(rows, tmp_path / "a.csv")
        write_report(evaluate_all(state, corpus), tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_report_values_read_back(self, corpus, state, tmp_path):
        rows = evaluate_all(state, corpus)
        write_report(rows, tmp_path / "report.csv")
        loaded = read_report(tmp_path / "report.csv")
        assert len(loaded) == len(rows)
        by_key = {(r["target"], r["metric"]): float(r["value"]) for r in loaded}
        for r in rows:
            assert by_key[(r["target"], r["metric"])] == pytest.approx(
                float(r["value"]), abs=1e-12)
        for r in loaded:
            if r["metric"] in ("auc", "pauc"):
                assert 0.0 <= float(r["value"]) <= 1.0

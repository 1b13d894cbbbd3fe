"""Frozen-embedding evaluation: export, aggregation, ridge probes, reports.

The probe path is: embed segments in eval mode, mean-aggregate embeddings
per participant, fit a closed-form ridge model on train-split participants,
and score test-split participants. Classification targets are continuous
labels binarized at their population median; labels that are already 0/1
are used as is. Scores for classification are the continuous ridge
predictions, ranked by AUC and partial AUC; regression reports mean
absolute error. Everything here is deterministic: no random draws.

On disk an embedding table is a directory mirroring the corpus layout:
manifest.json (dimensions, CRC-32 checksums), embeddings.bin
(little-endian float32, one D-vector per row), index.csv (segment_id,
participant_id, split, byte_offset).
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corpus import Corpus, draw_participant
from .metrics import (batched_effective_rank, dispersion_ratio, mae,
                      partial_auc, roc_auc)
from .training import TrainState

FORMAT_VERSION = 1
DEFAULT_ALPHA_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
DEFAULT_TARGETS = (("pseudo_age", "classification"),
                   ("pseudo_sex", "classification"),
                   ("pseudo_age", "regression"),
                   ("pseudo_bmi", "regression"))
REPORT_COLUMNS = ("target", "task", "metric", "value", "n_train", "n_test",
                  "alpha")
TASKS = ("classification", "regression")


@dataclass
class EmbeddingTable:
    """Aligned per-segment columns plus the [N, D] embedding matrix."""

    segment_ids: np.ndarray
    participant_ids: np.ndarray
    splits: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self):
        n = len(self.segment_ids)
        if not (len(self.participant_ids) == len(self.splits)
                == self.embeddings.shape[0] == n):
            raise ValueError("embedding table columns must align")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def rows_for_split(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)


def embed_corpus(state: TrainState, corpus: Corpus, split: str = "all",
                 batch_size: int = 128) -> EmbeddingTable:
    """Eval-mode embeddings for one split (or every segment with "all")."""
    channels = corpus.config.modality.channels
    if state.encoder_cfg.in_channels != channels:
        raise ValueError(f"encoder takes {state.encoder_cfg.in_channels} "
                         f"channels, corpus provides {channels}")
    if split == "all":
        idx = np.arange(corpus.n_segments)
    else:
        idx = corpus.indices_for_split(split)
    out = np.empty((len(idx), state.encoder_cfg.embedding_dim), dtype=np.float32)
    with ad.no_grad():
        for start in range(0, len(idx), batch_size):
            chunk = corpus.segments[idx[start:start + batch_size]]
            emb = state.encoder.forward(ad.Tensor(chunk), training=False)
            out[start:start + len(chunk)] = emb.data
    return EmbeddingTable(corpus.segment_ids[idx].copy(),
                          corpus.participant_ids[idx].copy(),
                          corpus.splits[idx].copy(), out)


def _crc32_of(path: Path) -> int:
    crc = 0
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            crc = zlib.crc32(chunk, crc)
    return crc


def save_embeddings(table: EmbeddingTable, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    row_bytes = table.dim * 4
    np.ascontiguousarray(table.embeddings, dtype="<f4").tofile(out / "embeddings.bin")
    with open(out / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment_id", "participant_id", "split", "byte_offset"])
        for i in range(len(table.segment_ids)):
            writer.writerow([int(table.segment_ids[i]),
                             int(table.participant_ids[i]),
                             table.splits[i], i * row_bytes])
    files = {}
    for name in ("embeddings.bin", "index.csv"):
        path = out / name
        files[name] = {"bytes": path.stat().st_size, "crc32": _crc32_of(path)}
    manifest = {
        "format_version": FORMAT_VERSION,
        "embedding_dim": table.dim,
        "n_rows": len(table.segment_ids),
        "files": files,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_embeddings(table_dir) -> EmbeddingTable:
    """Load and verify an embedding directory; raises on corruption."""
    root = Path(table_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ValueError(f"no embedding manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError("unsupported embedding format version "
                         f"{manifest.get('format_version')}")
    for name, meta in manifest["files"].items():
        path = root / name
        if not path.exists():
            raise ValueError(f"embedding file missing: {name}")
        if path.stat().st_size != meta["bytes"]:
            raise ValueError(f"embedding file {name} is {path.stat().st_size} "
                             f"bytes, manifest says {meta['bytes']}")
        if _crc32_of(path) != meta["crc32"]:
            raise ValueError(f"checksum mismatch for {name}")
    n, dim = manifest["n_rows"], manifest["embedding_dim"]
    data = np.fromfile(root / "embeddings.bin", dtype="<f4")
    if data.size != n * dim:
        raise ValueError(f"embedding blob holds {data.size} values, expected "
                         f"{n * dim}")
    segment_ids = np.empty(n, dtype=np.int64)
    participant_ids = np.empty(n, dtype=np.int64)
    splits = np.empty(n, dtype=object)
    with open(root / "index.csv", newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            if i >= n:
                raise ValueError("index.csv has more rows than the manifest declares")
            segment_ids[i] = int(row["segment_id"])
            participant_ids[i] = int(row["participant_id"])
            splits[i] = row["split"]
            if int(row["byte_offset"]) != i * dim * 4:
                raise ValueError(f"unexpected byte offset in row {i}")
    return EmbeddingTable(segment_ids, participant_ids, splits.astype(str),
                          data.reshape(n, dim).astype(np.float32))


def aggregate_by_participant(table: EmbeddingTable) -> tuple[np.ndarray, np.ndarray]:
    """Sorted unique participant ids and their mean embedding vectors."""
    unique = np.unique(table.participant_ids)
    means = np.empty((len(unique), table.dim), dtype=np.float64)
    for i, p in enumerate(unique):
        means[i] = table.embeddings[table.participant_ids == p].mean(
            axis=0, dtype=np.float64)
    return unique, means


def ridge_fit(X, y, alpha: float) -> tuple[np.ndarray, float]:
    """Closed-form ridge on centered data; the intercept is unpenalized.

    Solves (X_c^T X_c + alpha I) w = X_c^T y_c and returns (w, intercept)
    with intercept = mean(y) - mean(X) @ w.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"need X [n, D] and y [n], got {X.shape} and {y.shape}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    Xc = X - x_mean
    gram = Xc.T @ Xc + alpha * np.eye(X.shape[1])
    if alpha == 0.0 and np.linalg.matrix_rank(gram) < X.shape[1]:
        raise ValueError("singular system: centered features are rank "
                         "deficient and alpha is 0")
    w = np.linalg.solve(gram, Xc.T @ (y - y_mean))
    return w, y_mean - float(x_mean @ w)


def ridge_predict(X, w: np.ndarray, intercept: float) -> np.ndarray:
    return np.asarray(X, dtype=np.float64) @ w + intercept


def participant_folds(pids, n_folds: int = 5) -> np.ndarray:
    """Fold id per row: rank of the participant id in sorted order, mod
    n_folds. Deterministic and independent of row order."""
    pids = np.asarray(pids)
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    folds = np.empty(len(pids), dtype=np.int64)
    folds[np.argsort(pids, kind="stable")] = np.arange(len(pids)) % n_folds
    return folds


def select_alpha(X, y, pids, grid=DEFAULT_ALPHA_GRID, n_folds: int = 5) -> float:
    """Grid search by participant-fold cross-validated squared error."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(grid) == 0:
        raise ValueError("alpha grid is empty")
    n_folds = min(n_folds, X.shape[0])
    folds = participant_folds(pids, n_folds)
    best_alpha, best_err = None, np.inf
    for alpha in grid:
        sq_sum = 0.0
        for f in range(n_folds):
            hold = folds == f
            w, b = ridge_fit(X[~hold], y[~hold], alpha)
            residual = ridge_predict(X[hold], w, b) - y[hold]
            sq_sum += float(np.sum(residual ** 2))
        if sq_sum < best_err:
            best_alpha, best_err = float(alpha), sq_sum
    return best_alpha


@dataclass
class ProbeReport:
    target: str
    task: str
    auc: float | None
    pauc: float | None
    mae: float | None
    n_train: int
    n_test: int
    alpha: float

    def rows(self) -> list[dict]:
        metrics = ([("auc", self.auc), ("pauc", self.pauc)]
                   if self.task == "classification" else [("mae", self.mae)])
        return [{"target": self.target, "task": self.task, "metric": m,
                 "value": v, "n_train": self.n_train, "n_test": self.n_test,
                 "alpha": self.alpha} for m, v in metrics]


def binarize_labels(values: np.ndarray) -> tuple[np.ndarray, float | None]:
    """0/1 labels from a continuous column via its population median; a
    column that is already 0/1 passes through with no threshold."""
    values = np.asarray(values, dtype=np.float64)
    if set(np.unique(values)) <= {0.0, 1.0}:
        return values.astype(np.int64), None
    threshold = float(np.median(values))
    return (values > threshold).astype(np.int64), threshold


def probe_matrix(corpus: Corpus, pids, X, target: str, task: str,
                 alpha: float | None = None, grid=DEFAULT_ALPHA_GRID,
                 n_folds: int = 5) -> ProbeReport:
    """Ridge probe of one participant-level feature matrix against a label.

    Fits on train-split participants and scores test-split participants;
    the two sets are disjoint by construction and asserted anyway.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    pids = np.asarray(pids)
    X = np.asarray(X, dtype=np.float64)
    train_pids = np.intersect1d(pids, corpus.participants_in_split("train"))
    test_pids = np.intersect1d(pids, corpus.participants_in_split("test"))
    if np.intersect1d(train_pids, test_pids).size > 0:
        raise ValueError("train and test participants overlap")
    if len(train_pids) < 2 or len(test_pids) < 1:
        raise ValueError(f"need >= 2 train and >= 1 test participants, have "
                         f"{len(train_pids)} and {len(test_pids)}")
    order = np.argsort(pids, kind="stable")
    lookup = order[np.searchsorted(pids[order], train_pids)]
    X_train = X[lookup]
    X_test = X[order[np.searchsorted(pids[order], test_pids)]]

    y_train = corpus.label_for_participants(target, train_pids)
    y_test = corpus.label_for_participants(target, test_pids)
    if task == "classification":
        population = np.asarray(corpus.labels[target], dtype=np.float64)
        _, threshold = binarize_labels(population)
        if threshold is None:
            y_train = y_train.astype(np.int64)
            y_test = y_test.astype(np.int64)
        else:
            y_train = (y_train > threshold).astype(np.int64)
            y_test = (y_test > threshold).astype(np.int64)
        for name, y in (("train", y_train), ("test", y_test)):
            if len(np.unique(y)) < 2:
                raise ValueError(f"both classes must be present in the {name} "
                                 f"split for target {target!r}")
    if alpha is None:
        alpha = select_alpha(X_train, y_train.astype(np.float64), train_pids,
                             grid=grid, n_folds=n_folds)
    w, b = ridge_fit(X_train, y_train.astype(np.float64), alpha)
    scores = ridge_predict(X_test, w, b)
    if task == "classification":
        return ProbeReport(target, task, roc_auc(scores, y_test),
                           partial_auc(scores, y_test), None,
                           len(train_pids), len(test_pids), alpha)
    return ProbeReport(target, task, None, None, mae(scores, y_test),
                       len(train_pids), len(test_pids), alpha)


def probe_target(table: EmbeddingTable, corpus: Corpus, target: str, task: str,
                 alpha: float | None = None, grid=DEFAULT_ALPHA_GRID,
                 n_folds: int = 5) -> ProbeReport:
    pids, X = aggregate_by_participant(table)
    return probe_matrix(corpus, pids, X, target, task, alpha, grid, n_folds)


def oracle_feature_matrix(corpus: Corpus) -> tuple[np.ndarray, np.ndarray]:
    """Generative per-participant features (rate, variability, noise, and
    morphology factors): the learnability ceiling for any embedding probe."""
    pids = np.asarray(corpus.labels["participant_id"], dtype=np.int64)
    X = np.empty((len(pids), 9), dtype=np.float64)
    for i, p in enumerate(pids):
        latent = draw_participant(corpus.config.seed, int(p))
        X[i] = [latent.base_heart_rate_bpm, latent.hr_variability,
                latent.noise_level, *latent.morphology]
    return pids, X


def evaluate_all(state: TrainState, corpus: Corpus, targets=DEFAULT_TARGETS,
                 ser_batch: int = 64, ridge_grid=DEFAULT_ALPHA_GRID) -> list[dict]:
    """Probe every target plus representation-quality metrics; returns CSV
    row dicts in a deterministic order."""
    table = embed_corpus(state, corpus, "all")
    rows: list[dict] = []
    for target, task in targets:
        rows.extend(probe_target(table, corpus, target, task,
                                 grid=ridge_grid).rows())

    val_rows = table.rows_for_split("val")
    val_emb = table.embeddings[val_rows].astype(np.float64)
    n_val = len(val_rows)
    ser = batched_effective_rank(val_emb, batch_size=ser_batch)
    rows.append({"target": "embeddings", "task": "representation",
                 "metric": "effective_rank", "value": ser, "n_train": 0,
                 "n_test": n_val, "alpha": ""})
    rows.append({"target": "embeddings", "task": "representation",
                 "metric": "ser_batch", "value": float(min(ser_batch, n_val)),
                 "n_train": 0, "n_test": n_val, "alpha": ""})
    _, mean_ratio = dispersion_ratio(val_emb, table.participant_ids[val_rows])
    rows.append({"target": "embeddings", "task": "representation",
                 "metric": "dispersion_mean", "value": mean_ratio,
                 "n_train": 0, "n_test": n_val, "alpha": ""})
    return rows


def write_report(rows: list[dict], path) -> None:
    """CSV report; float values written via repr so reruns are byte-equal."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            rendered = []
            for col in REPORT_COLUMNS:
                value = row[col]
                rendered.append(repr(float(value))
                                if isinstance(value, float) else value)
            writer.writerow(rendered)


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

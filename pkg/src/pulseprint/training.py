"""Self-supervised pre-training: positive pairs, momentum targets, Adam.

Four frameworks share one loop skeleton. "ours" pulls two augmented views
of a participant (or segment) toward each other with a temperature-scaled
contrastive loss against a momentum (EMA) branch and adds a spread
regularizer; "ours_no_koleo" drops the regularizer; "simclr" uses the same
contrastive loss with both views through the online network and no
momentum branch; "byol" adds a prediction head and regresses cosine
alignment against the momentum target.

Every random draw comes from a stream keyed by (seed, purpose, epoch,
batch, slot, item), so batch assembly is schedule-independent and a resumed
run re-derives exactly the streams the uninterrupted run would have used.
The momentum branch always runs with batch statistics and frozen running
buffers; its parameters move only through the EMA update.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import augment as ag
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Corpus
from .encoder import (BlockSpec, Encoder, EncoderConfig, HeadConfig, MLPHead,
                      desk_encoder, desk_head)
from .losses import LossConfig, byol_loss, combined_loss, infonce
from .optim import Adam, AdamConfig, lr_schedule
from .rngs import substream

FRAMEWORKS = ("ours", "ours_no_koleo", "simclr", "byol")
PAIR_MODES = ("participant", "segment")

_STREAM_INIT = 0
_STREAM_PAIRS = 1
_STREAM_AUG = 2
_STREAM_VAL = 3


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class TrainConfig:
    framework: str = "ours"
    pair_mode: str = "participant"
    batch_pairs: int = 64
    momentum_rate: float = 0.99
    lr: float | None = None  # None resolves per framework
    adam: AdamConfig = field(default_factory=AdamConfig)
    lr_step_epochs: int | None = None  # None resolves to max(1, epochs // 3)
    lr_step_factor: float = 0.5
    epochs: int = 5
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        if self.framework not in FRAMEWORKS:
            raise ValueError(f"unknown framework {self.framework!r}")
        if self.pair_mode not in PAIR_MODES:
            raise ValueError(f"unknown pair mode {self.pair_mode!r}")
        if self.batch_pairs < 2:
            raise ValueError("batch_pairs must be at least 2")
        if not 0.0 <= self.momentum_rate <= 1.0:
            raise ValueError(f"momentum rate outside [0, 1]: {self.momentum_rate}")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lr_step_epochs is not None and self.lr_step_epochs < 1:
            raise ValueError("lr_step_epochs must be at least 1")
        if not 0.0 < self.lr_step_factor <= 1.0:
            raise ValueError("lr_step_factor must lie in (0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        self.adam.validate()
        self.loss.validate()

    @property
    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.00025 if self.framework == "byol" else 0.001

    @property
    def resolved_step_epochs(self) -> int:
        if self.lr_step_epochs is not None:
            return self.lr_step_epochs
        return max(1, self.epochs // 3)

    def effective_loss(self) -> LossConfig:
        if self.framework == "ours_no_koleo":
            return LossConfig(self.loss.temperature, 0.0, self.loss.koleo_eps,
                              self.loss.halve_terms)
        return self.loss


def sample_pair_batch(corpus: Corpus, pair_mode: str, rng, batch_pairs: int,
                      split: str = "train"):
    """Indices for one batch of positive pairs.

    participant mode: batch_pairs distinct participants, two distinct
    segments each. segment mode: batch_pairs distinct segments, each
    duplicated into both slots (the views then differ only by augmentation).
    """
    split_idx = corpus.indices_for_split(split)
    if pair_mode == "participant":
        pids = corpus.participant_ids[split_idx]
        unique = np.unique(pids)
        eligible = np.array([p for p in unique if np.sum(pids == p) >= 2])
        if len(eligible) < batch_pairs:
            raise ValueError(f"need {batch_pairs} {split} participants with >= 2 "
                             f"segments, have {len(eligible)}")
        chosen = rng.choice(eligible, size=batch_pairs, replace=False)
        idx1 = np.empty(batch_pairs, dtype=np.int64)
        idx2 = np.empty(batch_pairs, dtype=np.int64)
        for i, p in enumerate(chosen):
            segs = split_idx[pids == p]
            pick = rng.choice(len(segs), size=2, replace=False)
            idx1[i], idx2[i] = segs[pick[0]], segs[pick[1]]
        return idx1, idx2, chosen
    if len(split_idx) < batch_pairs:
        raise ValueError(f"need {batch_pairs} {split} segments, have {len(split_idx)}")
    picked = rng.choice(split_idx, size=batch_pairs, replace=False)
    return picked.copy(), picked.copy(), corpus.participant_ids[picked]


def ema_update(online: dict, momentum: dict, rate: float) -> None:
    """In-place xi <- rate*xi + (1-rate)*theta over matching parameter trees."""
    if set(online) != set(momentum):
        raise ValueError("parameter trees differ in names")
    for name, theta in online.items():
        xi = momentum[name]
        if xi.data.shape != theta.data.shape:
            raise ValueError(f"parameter {name!r} shape mismatch")
        xi.data[...] = rate * xi.data + (1.0 - rate) * theta.data


def _copy_into(dst_params: dict, dst_buffers: dict, src_params: dict, src_buffers: dict):
    for k, p in src_params.items():
        dst_params[k].data[...] = p.data
    for k, b in src_buffers.items():
        dst_buffers[k][...] = b


class TrainState:
    """Networks, optimizer, and counters for one pre-training run."""

    def __init__(self, cfg: TrainConfig, encoder_cfg: EncoderConfig,
                 head_cfg: HeadConfig):
        cfg.validate()
        self.cfg = cfg
        self.encoder_cfg = encoder_cfg
        self.head_cfg = head_cfg
        seed = cfg.seed
        self.encoder = Encoder(encoder_cfg, substream(seed, _STREAM_INIT, 0))
        self.projection = MLPHead(head_cfg, substream(seed, _STREAM_INIT, 1))
        self.prediction = None
        if cfg.framework == "byol":
            pred_cfg = HeadConfig(head_cfg.output_dim, head_cfg.hidden_dim,
                                  head_cfg.output_dim, head_cfg.batch_norm)
            self.prediction = MLPHead(pred_cfg, substream(seed, _STREAM_INIT, 2))
        self.momentum_encoder = None
        self.momentum_projection = None
        if cfg.framework in ("ours", "ours_no_koleo", "byol"):
            self.momentum_encoder = Encoder(encoder_cfg, substream(seed, _STREAM_INIT, 3))
            self.momentum_projection = MLPHead(head_cfg, substream(seed, _STREAM_INIT, 4))
            _copy_into(self.momentum_encoder.params, self.momentum_encoder.buffers,
                       self.encoder.params, self.encoder.buffers)
            _copy_into(self.momentum_projection.params, self.momentum_projection.buffers,
                       self.projection.params, self.projection.buffers)
        self.adam = Adam(self.online_params(), cfg.adam)
        self.step = 0
        self.epoch = 0

    def online_params(self) -> dict:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"projection.{k}": v for k, v in self.projection.params.items()})
        if self.prediction is not None:
            out.update({f"prediction.{k}": v for k, v in self.prediction.params.items()})
        return out

    def momentum_params(self) -> dict:
        out = {f"encoder.{k}": v for k, v in self.momentum_encoder.params.items()}
        out.update({f"projection.{k}": v
                    for k, v in self.momentum_projection.params.items()})
        return out

    def ema_source_params(self) -> dict:
        return {k: v for k, v in self.online_params().items()
                if not k.startswith("prediction.")}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        scopes = [("online.encoder", self.encoder), ("online.projection", self.projection)]
        if self.prediction is not None:
            scopes.append(("online.prediction", self.prediction))
        if self.momentum_encoder is not None:
            scopes.append(("momentum.encoder", self.momentum_encoder))
            scopes.append(("momentum.projection", self.momentum_projection))
        for prefix, module in scopes:
            for k, p in module.params.items():
                out[f"{prefix}.params.{k}"] = p.data
            for k, b in module.buffers.items():
                out[f"{prefix}.buffers.{k}"] = b
        out.update(self.adam.state_arrays())
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int, epoch: int):
        expected = self.state_arrays()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))[:3]
            extra = sorted(set(arrays) - set(expected))[:3]
            raise ValueError(f"state mismatch; missing {missing}, unexpected {extra}")
        for name, arr in arrays.items():
            if not name.startswith("adam."):
                if expected[name].shape != arr.shape:
                    raise ValueError(f"shape mismatch for {name!r}")
                expected[name][...] = arr
        self.adam.load_state_arrays(arrays, t=step)
        self.step = step
        self.epoch = epoch


def _forward_online(state: TrainState, x: ad.Tensor,
                    update_stats: bool = True) -> ad.Tensor:
    e = state.encoder.forward(x, training=True, update_stats=update_stats)
    return state.projection.forward(e, training=True, update_stats=update_stats)


def _forward_momentum(state: TrainState, x: ad.Tensor) -> ad.Tensor:
    # batch statistics, frozen running buffers, no gradient tracking
    with ad.no_grad():
        e = state.momentum_encoder.forward(x, training=True, update_stats=False)
        return state.momentum_projection.forward(e, training=True, update_stats=False)


def compute_loss(state: TrainState, x1: np.ndarray, x2: np.ndarray,
                 update_stats: bool = True) -> ad.Tensor:
    cfg = state.cfg
    t1 = ad.Tensor(x1)
    t2 = ad.Tensor(x2)
    if cfg.framework in ("ours", "ours_no_koleo"):
        h1 = _forward_online(state, t1, update_stats)
        h2 = _forward_online(state, t2, update_stats)
        h1m = _forward_momentum(state, t1)
        h2m = _forward_momentum(state, t2)
        return combined_loss(h1, h2, h1m, h2m, cfg.effective_loss())
    if cfg.framework == "simclr":
        h1 = _forward_online(state, t1, update_stats)
        h2 = _forward_online(state, t2, update_stats)
        tau = cfg.loss.temperature
        return ad.scale(ad.add(infonce(h1, h2, tau), infonce(h2, h1, tau)), 0.5)
    p1 = state.prediction.forward(_forward_online(state, t1, update_stats),
                                  training=True, update_stats=update_stats)
    p2 = state.prediction.forward(_forward_online(state, t2, update_stats),
                                  training=True, update_stats=update_stats)
    z1t = _forward_momentum(state, t1)
    z2t = _forward_momentum(state, t2)
    return ad.scale(ad.add(byol_loss(p1, z2t), byol_loss(p2, z1t)), 0.5)


def train_step(state: TrainState, x1: np.ndarray, x2: np.ndarray, lr: float) -> float:
    """One optimization step; returns the scalar loss.

    Order: forward (online and momentum), backward, Adam update of online
    parameters, then EMA update of the momentum branch.
    """
    loss = compute_loss(state, x1, x2)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at step {state.step} "
                               f"(epoch {state.epoch}, framework {state.cfg.framework})")
    ad.backward(loss)
    state.adam.step(lr)
    if state.momentum_encoder is not None:
        ema_update(state.ema_source_params(), state.momentum_params(),
                   state.cfg.momentum_rate)
    state.step += 1
    return value


def assemble_batch(corpus: Corpus, cfg: TrainConfig, policy: ag.AugmentationPolicy,
                   epoch: int, batch_index: int):
    """Deterministic augmented views for one (epoch, batch) coordinate."""
    pair_rng = substream(cfg.seed, _STREAM_PAIRS, epoch, batch_index)
    idx1, idx2, pids = sample_pair_batch(corpus, cfg.pair_mode, pair_rng,
                                         cfg.batch_pairs)
    views = []
    for slot, indices in enumerate((idx1, idx2)):
        batch = np.empty((len(indices),) + corpus.segments.shape[1:], dtype=np.float32)
        for i, seg_idx in enumerate(indices):
            item_rng = substream(cfg.seed, _STREAM_AUG, epoch, batch_index, slot, i)
            batch[i] = ag.apply_policy(corpus.segments[seg_idx], policy, item_rng)
        views.append(batch)
    return views[0], views[1], pids


def validation_loss(state: TrainState, corpus: Corpus, epoch: int,
                    n_batches: int = 3) -> float:
    """Framework loss on unaugmented validation pairs, batch-normalized the
    same way as training but with no parameter or buffer updates."""
    cfg = state.cfg
    val_idx = corpus.indices_for_split("val")
    pids = corpus.participant_ids[val_idx]
    eligible = np.array([p for p in np.unique(pids) if np.sum(pids == p) >= 2])
    pairs = min(cfg.batch_pairs, len(eligible))
    if pairs < 2:
        raise ValueError("validation split too small for pair sampling")
    losses = []
    for b in range(n_batches):
        rng = substream(cfg.seed, _STREAM_VAL, epoch, b)
        idx1, idx2, _ = sample_pair_batch(corpus, "participant", rng, pairs, split="val")
        x1 = corpus.segments[idx1]
        x2 = corpus.segments[idx2]
        with ad.no_grad():
            loss = compute_loss(state, x1, x2, update_stats=False)
        losses.append(loss.item())
    return float(np.mean(losses))


def embed_split(state: TrainState, corpus: Corpus, split: str,
                batch_size: int = 128) -> np.ndarray:
    """Eval-mode encoder embeddings (running statistics, no augmentation)."""
    idx = corpus.indices_for_split(split)
    out = np.empty((len(idx), state.encoder_cfg.embedding_dim), dtype=np.float32)
    with ad.no_grad():
        for start in range(0, len(idx), batch_size):
            chunk = corpus.segments[idx[start:start + batch_size]]
            emb = state.encoder.forward(ad.Tensor(chunk), training=False)
            out[start:start + len(chunk)] = emb.data
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    effective_rank: float
    lr: float


@dataclass
class PretrainResult:
    state: TrainState
    records: list
    metrics_path: Path | None
    final_checkpoint: Path | None
    best_checkpoint: Path | None


METRICS_COLUMNS = ("epoch", "train_loss", "val_loss", "effective_rank", "lr")


def _write_metrics(path: Path, records: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for r in records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                             repr(r.effective_rank), repr(r.lr)])


def read_metrics(path) -> list[EpochRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(EpochRecord(int(row["epoch"]), float(row["train_loss"]),
                                       float(row["val_loss"]),
                                       float(row["effective_rank"]), float(row["lr"])))
    return records


def checkpoint_meta(state: TrainState) -> dict:
    return {
        "framework": state.cfg.framework,
        "pair_mode": state.cfg.pair_mode,
        "seed": state.cfg.seed,
        "step": state.step,
        "epoch": state.epoch,
        "encoder_config": asdict(state.encoder_cfg),
        "head_config": asdict(state.head_cfg),
    }


def save_train_checkpoint(state: TrainState, path) -> None:
    save_checkpoint(path, state.state_arrays(), checkpoint_meta(state))


def load_train_checkpoint(path, cfg: TrainConfig) -> TrainState:
    """Rebuild a TrainState from a checkpoint directory; the framework and
    model geometry must match the requesting config."""
    arrays, meta = load_checkpoint(path)
    if meta["framework"] != cfg.framework:
        raise ValueError(f"checkpoint framework {meta['framework']!r} does not match "
                         f"requested {cfg.framework!r}")
    enc_cfg_dict = dict(meta["encoder_config"])
    enc_cfg_dict["blocks"] = tuple(BlockSpec(**b) for b in enc_cfg_dict["blocks"])
    enc_cfg = EncoderConfig(**enc_cfg_dict)
    head_cfg = HeadConfig(**meta["head_config"])
    state = TrainState(cfg, enc_cfg, head_cfg)
    state.load_state_arrays(arrays, step=meta["step"], epoch=meta["epoch"])
    return state


def run_pretraining(corpus: Corpus, cfg: TrainConfig,
                    encoder_cfg: EncoderConfig | None = None,
                    head_cfg: HeadConfig | None = None,
                    policy: ag.AugmentationPolicy | None = None,
                    out_dir=None, resume_from=None,
                    log=None) -> PretrainResult:
    """Full pre-training loop with per-epoch metrics and checkpoints.

    An epoch is floor(n_train_segments / (2 * batch_pairs)) batches. After
    each epoch the validation loss and the smooth effective rank of
    validation embeddings are logged; the final checkpoint is refreshed and
    the best (lowest validation loss) checkpoint kept separately.
    """
    from .metrics import batched_effective_rank

    cfg.validate()
    if encoder_cfg is None:
        encoder_cfg = desk_encoder(corpus.config.modality.channels)
    if head_cfg is None:
        head_cfg = desk_head(encoder_cfg.embedding_dim)
    if policy is None:
        policy = ag.default_policy(corpus.config.modality.modality)
    policy.validate(channels=corpus.config.modality.channels)

    if resume_from is not None:
        state = load_train_checkpoint(resume_from, cfg)
        start_epoch = state.epoch
    else:
        state = TrainState(cfg, encoder_cfg, head_cfg)
        start_epoch = 0

    n_train = len(corpus.indices_for_split("train"))
    steps_per_epoch = max(1, n_train // (2 * cfg.batch_pairs))

    out = Path(out_dir) if out_dir is not None else None
    metrics_path = final_path = best_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        final_path = out / "checkpoint_final"
        best_path = out / "checkpoint_best"

    records: list[EpochRecord] = []
    if resume_from is not None and metrics_path is not None and metrics_path.exists():
        records = [r for r in read_metrics(metrics_path) if r.epoch < start_epoch]
    best_val = min((r.val_loss for r in records), default=math.inf)
    for epoch in range(start_epoch, cfg.epochs):
        state.epoch = epoch
        lr = lr_schedule(epoch, cfg.resolved_lr, cfg.resolved_step_epochs,
                         cfg.lr_step_factor)
        epoch_losses = []
        t0 = time.time()
        for b in range(steps_per_epoch):
            x1, x2, _ = assemble_batch(corpus, cfg, policy, epoch, b)
            epoch_losses.append(train_step(state, x1, x2, lr))
        val = validation_loss(state, corpus, epoch)
        emb = embed_split(state, corpus, "val")
        ser = batched_effective_rank(emb, batch_size=min(64, emb.shape[0]))
        rec = EpochRecord(epoch, float(np.mean(epoch_losses)), val, ser, lr)
        records.append(rec)
        state.epoch = epoch + 1
        if log is not None:
            log(f"epoch {epoch}: train {rec.train_loss:.4f} val {rec.val_loss:.4f} "
                f"rank {rec.effective_rank:.2f} lr {lr:.2e} "
                f"({time.time() - t0:.1f}s)")
        if out is not None:
            save_train_checkpoint(state, final_path)
            if val < best_val:
                save_train_checkpoint(state, best_path)
            _write_metrics(metrics_path, records)
        best_val = min(best_val, val)

    return PretrainResult(state, records, metrics_path, final_path, best_path)

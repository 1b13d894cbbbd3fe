"""Paired training/eval runs that isolate one design choice at a time.

Four suites, each a list of member runs derived from one base config:

  positive-pairs   pair sampling at participant vs segment granularity
  frameworks       ours / ours_no_koleo / simclr / byol
  augmentations    each augmentation alone at probability 1, plus the
                   full default policy
  dispersion       low- vs high-jitter corpora, same participants

Every member trains from scratch with its own seed and is scored with the
standard probe/representation evaluation; results land in one long-format
CSV (suite, seed, variant, metric, value). Members run sequentially by
default; process parallelism is opt-in and changes nothing about the
results because each member is a pure function of its configs.
"""

from __future__ import annotations

import csv
import dataclasses
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .augment import KIND_ORDER, AugmentationPolicy, AugmentationSpec, default_policy
from .config import EvalConfig, RunConfig, echo_config
from .corpus import Corpus, CorpusConfig, ModalityConfig, generate_corpus
from .probing import evaluate_all
from .training import FRAMEWORKS, TrainConfig, run_pretraining, validation_loss

SUITES = ("positive-pairs", "frameworks", "augmentations", "dispersion")
ABLATION_COLUMNS = ("suite", "seed", "variant", "metric", "value")
DEFAULT_SEEDS = (0, 1, 2)

# jitter of the low-variability corpus relative to the base corpus
LOW_JITTER_FACTOR = 1.0 / 3.0

SUITE_FIGURE_METRICS = {
    "positive-pairs": ("pseudo_age_classification_auc",),
    "frameworks": ("effective_rank",),
    "augmentations": ("pseudo_age_classification_auc", "effective_rank"),
    "dispersion": ("dispersion_mean", "final_val_infonce"),
}


@dataclasses.dataclass
class Member:
    """One fully specified training run inside a suite."""

    suite: str
    seed: int
    variant: str
    corpus_cfg: CorpusConfig
    train_cfg: TrainConfig
    policy: AugmentationPolicy | None
    encoder_cfg: object
    head_cfg: object
    eval_cfg: EvalConfig
    measure_infonce: bool = False


def _with_jitter(cfg: CorpusConfig, jitter: float) -> CorpusConfig:
    mod = cfg.modality
    return dataclasses.replace(cfg, modality=ModalityConfig(
        mod.modality, mod.channels, mod.sample_rate_hz, mod.segment_seconds,
        jitter))


def _isolated_policies(modality: str) -> list[tuple[str, AugmentationPolicy]]:
    """(variant name, policy) for each default-policy kind alone at p=1."""
    kinds = [e.kind for e in default_policy(modality).entries]
    out = []
    for kind in KIND_ORDER:
        if kind in kinds:
            out.append((kind, AugmentationPolicy([AugmentationSpec(kind, 1.0)])))
    return out


def suite_members(suite: str, base: RunConfig,
                  seeds=DEFAULT_SEEDS) -> list[Member]:
    """Expand a base config into the suite's member runs, one per
    (variant, seed). The member seed replaces the base training seed."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}, pick one of {SUITES}")
    members = []

    def member(variant, seed, corpus_cfg=None, policy=None, measure_infonce=False,
               **train_overrides):
        train_cfg = dataclasses.replace(base.train, seed=seed, **train_overrides)
        members.append(Member(suite, seed, variant,
                              corpus_cfg or base.corpus, train_cfg,
                              policy if policy is not None else base.policy,
                              base.encoder_cfg, base.head_cfg, base.eval,
                              measure_infonce))

    for seed in seeds:
        if suite == "positive-pairs":
            for mode in ("participant", "segment"):
                member(mode, seed, pair_mode=mode)
        elif suite == "frameworks":
            for framework in FRAMEWORKS:
                member(framework, seed, framework=framework)
        elif suite == "augmentations":
            for name, policy in _isolated_policies(base.corpus.modality.modality):
                member(name, seed, policy=policy)
            member("full", seed, policy=default_policy(base.corpus.modality.modality))
        elif suite == "dispersion":
            base_jitter = base.corpus.modality.within_participant_jitter
            low = _with_jitter(base.corpus, base_jitter * LOW_JITTER_FACTOR)
            member("jitter_low", seed, corpus_cfg=low, framework="ours",
                   measure_infonce=True)
            member("jitter_high", seed, corpus_cfg=base.corpus, framework="ours",
                   measure_infonce=True)
    return members


def _contrastive_validation_loss(state, corpus: Corpus) -> float:
    """Validation loss with the spread term switched off: the pure averaged
    contrastive objective against the momentum branch."""
    original = state.cfg
    state.cfg = dataclasses.replace(original, framework="ours_no_koleo")
    try:
        return validation_loss(state, corpus, epoch=original.epochs)
    finally:
        state.cfg = original


def run_member(member: Member, out_dir, corpus: Corpus | None = None) -> list[dict]:
    """Train and evaluate one member; returns its long-format rows."""
    if corpus is None:
        corpus = generate_corpus(member.corpus_cfg)
    result = run_pretraining(corpus, member.train_cfg,
                             encoder_cfg=member.encoder_cfg,
                             head_cfg=member.head_cfg,
                             policy=member.policy, out_dir=out_dir)
    rows = []

    def emit(metric, value):
        rows.append({"suite": member.suite, "seed": member.seed,
                     "variant": member.variant, "metric": metric,
                     "value": float(value)})

    final = result.records[-1]
    emit("final_train_loss", final.train_loss)
    emit("final_val_loss", final.val_loss)
    if member.measure_infonce:
        emit("final_val_infonce", _contrastive_validation_loss(result.state, corpus))

    for row in evaluate_all(result.state, corpus, targets=member.eval_cfg.targets,
                            ser_batch=member.eval_cfg.ser_batch,
                            ridge_grid=member.eval_cfg.ridge_grid):
        if row["task"] == "representation":
            if row["metric"] != "ser_batch":
                emit(row["metric"], row["value"])
        else:
            emit(f"{row['target']}_{row['task']}_{row['metric']}", row["value"])
    return rows


def _member_job(args):
    member, out_dir = args
    return run_member(member, out_dir)


def run_suite(suite: str, base: RunConfig, out_dir, seeds=DEFAULT_SEEDS,
              parallel: bool = False, log=None) -> list[dict]:
    """All member runs of a suite, with one ablation.csv at the top level.

    Sequential members share generated corpora (keyed by corpus config);
    parallel members regenerate them per process, which costs a little time
    and changes no output byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    members = suite_members(suite, base, seeds)
    jobs = [(m, out / f"{m.variant}_seed{m.seed}") for m in members]
    rows: list[dict] = []
    if parallel:
        with ProcessPoolExecutor() as pool:
            for member_rows in pool.map(_member_job, jobs):
                rows.extend(member_rows)
    else:
        corpora: dict[str, Corpus] = {}
        for member, member_out in jobs:
            key = repr(member.corpus_cfg)
            if key not in corpora:
                corpora[key] = generate_corpus(member.corpus_cfg)
            if log is not None:
                log(f"{suite}: {member.variant} seed {member.seed}")
            rows.extend(run_member(member, member_out, corpus=corpora[key]))
    write_ablation_rows(rows, out / "ablation.csv")
    echo_config(base, out)
    return rows


def write_ablation_rows(rows: list[dict], path) -> None:
    """Long-format CSV; float values via repr so reruns are byte-equal."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            writer.writerow([row["suite"], row["seed"], row["variant"],
                             row["metric"], repr(float(row["value"]))])


def read_ablation_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def majority_holds(rows: list[dict], metric: str, better: str, worse: str,
                   higher_is_better: bool = True) -> bool:
    """True when `better` beats `worse` on the metric for most seeds."""
    seeds = sorted({int(r["seed"]) for r in rows})
    if not seeds:
        raise ValueError("no rows to compare")
    wins = 0
    for seed in seeds:
        pick = {r["variant"]: float(r["value"]) for r in rows
                if int(r["seed"]) == seed and r["metric"] == metric}
        if better not in pick or worse not in pick:
            raise ValueError(f"seed {seed} lacks {metric} for {better}/{worse}")
        delta = pick[better] - pick[worse]
        wins += (delta > 0) if higher_is_better else (delta < 0)
    return wins * 2 > len(seeds)

"""Command-line entry point: generation, training, embedding, probing,
representation metrics, and ablation suites behind one declarative config.

Flags only pick files and commands; every knob lives in the JSON config so
a run is reproducible from its artifacts alone. Each command echoes the
fully resolved config into its output directory. Report-producing commands
also render figures next to their CSVs unless --no-figures is passed.

Exit codes: 0 success, 2 invalid config or input, 3 training aborted on a
non-finite loss (the last completed epoch's checkpoint stays on disk).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .ablation import (DEFAULT_SEEDS, SUITE_FIGURE_METRICS, SUITES,
                       run_suite)
from .config import ConfigError, RunConfig, echo_config, load_run_config
from .corpus import generate_corpus, load_corpus, save_corpus
from .figures import (plot_ablation_comparison, plot_dispersion_histogram,
                      plot_probe_summary, plot_training_curves)
from .metrics import batched_effective_rank, dispersion_ratio
from .probing import (REPORT_COLUMNS, embed_corpus, load_embeddings,
                      probe_target, save_embeddings, write_report)
from .training import TrainingDiverged, load_train_checkpoint, run_pretraining

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_DIVERGED = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pulseprint",
        description="Self-supervised pre-training on synthetic biosignals.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-corpus", help="synthesize a corpus directory")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)

    pre = sub.add_parser("pretrain", help="run the pre-training loop")
    pre.add_argument("--config", required=True)
    pre.add_argument("--corpus", required=True)
    pre.add_argument("--out", required=True)
    pre.add_argument("--resume", default=None,
                     help="checkpoint directory to continue from")
    pre.add_argument("--no-figures", action="store_true")

    emb = sub.add_parser("embed", help="export eval-mode embeddings")
    emb.add_argument("--config", required=True)
    emb.add_argument("--corpus", required=True)
    emb.add_argument("--checkpoint", required=True)
    emb.add_argument("--out", required=True)
    emb.add_argument("--split", default="all",
                     choices=("train", "val", "test", "all"))

    probe = sub.add_parser("probe", help="ridge probes on saved embeddings")
    probe.add_argument("--config", required=True)
    probe.add_argument("--corpus", required=True)
    probe.add_argument("--embeddings", required=True)
    probe.add_argument("--out", required=True)
    probe.add_argument("--no-figures", action="store_true")

    met = sub.add_parser("metrics", help="representation metrics on embeddings")
    met.add_argument("--config", required=True)
    met.add_argument("--embeddings", required=True)
    met.add_argument("--out", required=True)
    met.add_argument("--no-figures", action="store_true")

    abl = sub.add_parser("ablate", help="run one ablation suite")
    abl.add_argument("--suite", required=True, choices=SUITES)
    abl.add_argument("--config", required=True)
    abl.add_argument("--out", required=True)
    abl.add_argument("--seeds", type=int, default=len(DEFAULT_SEEDS),
                     help="number of training seeds per variant")
    abl.add_argument("--parallel", action="store_true",
                     help="run members as independent processes")
    abl.add_argument("--no-figures", action="store_true")
    return parser


def _cmd_gen_corpus(args) -> int:
    cfg = load_run_config(args.config)
    corpus = generate_corpus(cfg.corpus)
    save_corpus(corpus, args.out)
    echo_config(cfg, args.out)
    print(f"corpus: {corpus.n_segments} segments from "
          f"{cfg.corpus.n_participants} participants -> {args.out}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    corpus = load_corpus(args.corpus)
    echo_config(cfg, args.out)
    result = run_pretraining(corpus, cfg.train,
                             encoder_cfg=cfg.encoder_cfg,
                             head_cfg=cfg.head_cfg,
                             policy=cfg.policy,
                             out_dir=args.out,
                             resume_from=args.resume,
                             log=print)
    if not args.no_figures:
        plot_training_curves(result.records, Path(args.out) / "training_curves.png")
    print(f"pretrain: {len(result.records)} epochs -> {args.out}")
    return EXIT_OK


def _cmd_embed(args) -> int:
    cfg = load_run_config(args.config)
    corpus = load_corpus(args.corpus)
    state = load_train_checkpoint(args.checkpoint, cfg.train)
    table = embed_corpus(state, corpus, split=args.split)
    save_embeddings(table, args.out)
    echo_config(cfg, args.out)
    print(f"embed: {table.embeddings.shape[0]} x {table.dim} "
          f"({args.split}) -> {args.out}")
    return EXIT_OK


def _cmd_probe(args) -> int:
    cfg = load_run_config(args.config)
    corpus = load_corpus(args.corpus)
    table = load_embeddings(args.embeddings)
    rows = []
    for target, task in cfg.eval.targets:
        report = probe_target(table, corpus, target, task,
                              grid=cfg.eval.ridge_grid)
        rows.extend(report.rows())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(rows, out / "probe_report.csv")
    echo_config(cfg, out)
    if not args.no_figures:
        plot_probe_summary(rows, out / "probe_summary.png")
    for row in rows:
        print(f"{row['target']} {row['task']} {row['metric']} = "
              f"{float(row['value']):.4f}")
    return EXIT_OK


def _cmd_metrics(args) -> int:
    cfg = load_run_config(args.config)
    table = load_embeddings(args.embeddings)
    emb = table.embeddings.astype(np.float64)
    ser = batched_effective_rank(emb, batch_size=cfg.eval.ser_batch)
    per_dim, mean_ratio = dispersion_ratio(emb, table.participant_ids)
    n = emb.shape[0]
    rows = [
        {"target": "embeddings", "task": "representation",
         "metric": "effective_rank", "value": ser, "n_train": 0, "n_test": n,
         "alpha": ""},
        {"target": "embeddings", "task": "representation",
         "metric": "ser_batch", "value": float(min(cfg.eval.ser_batch, n)),
         "n_train": 0, "n_test": n, "alpha": ""},
        {"target": "embeddings", "task": "representation",
         "metric": "dispersion_mean", "value": float(mean_ratio), "n_train": 0,
         "n_test": n, "alpha": ""},
    ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(rows, out / "metrics_report.csv")
    echo_config(cfg, out)
    if not args.no_figures:
        plot_dispersion_histogram({"embeddings": per_dim},
                                  out / "dispersion_histogram.png")
    for row in rows:
        print(f"{row['metric']} = {float(row['value']):.4f}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    rows = run_suite(args.suite, cfg, args.out,
                     seeds=tuple(range(args.seeds)),
                     parallel=args.parallel, log=print)
    if not args.no_figures:
        for metric in SUITE_FIGURE_METRICS[args.suite]:
            if any(r["metric"] == metric for r in rows):
                plot_ablation_comparison(rows, metric,
                                         Path(args.out) / f"{metric}.png")
    print(f"ablate {args.suite}: {len(rows)} rows -> {args.out}")
    return EXIT_OK


_COMMANDS = {
    "gen-corpus": _cmd_gen_corpus,
    "pretrain": _cmd_pretrain,
    "embed": _cmd_embed,
    "probe": _cmd_probe,
    "metrics": _cmd_metrics,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        print("training aborted; the last completed epoch's checkpoint is "
              "retained", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

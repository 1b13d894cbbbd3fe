"""Declarative run configuration: one strict JSON document per run.

A run config has up to six sections (corpus, augmentation, encoder, loss,
train, eval), each optional with sensible defaults. Validation is strict:
unknown keys anywhere in the document are rejected, so a typo fails fast
instead of silently running with a default. The fully resolved document,
defaults filled in, is echoed into every output directory so artifacts
are self-describing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import DEFAULT_PARAMS, KIND_ORDER, AugmentationPolicy, AugmentationSpec
from .corpus import CorpusConfig, ModalityConfig, ecg_modality, ppg_modality
from .encoder import (BlockSpec, EncoderConfig, HeadConfig, desk_encoder,
                      desk_head, full_encoder, full_head, tiny_encoder,
                      tiny_head)
from .losses import LossConfig
from .probing import DEFAULT_ALPHA_GRID, DEFAULT_TARGETS, TASKS
from .training import FRAMEWORKS, PAIR_MODES, TrainConfig

ENCODER_PRESETS = {
    "full": (full_encoder, full_head),
    "desk": (desk_encoder, desk_head),
    "tiny": (tiny_encoder, tiny_head),
}

SECTIONS = ("corpus", "augmentation", "encoder", "loss", "train", "eval")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


def _check_keys(section: str, mapping: dict, allowed) -> None:
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


def _take(mapping: dict, key: str, kind, where: str):
    """Type-checked optional lookup; bool is not accepted where int is."""
    if key not in mapping:
        return None
    value = mapping[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or (kind in (int, float) and isinstance(value, bool)):
        raise ConfigError(f"{where}.{key} must be {kind.__name__}, "
                          f"got {type(value).__name__}")
    return value


@dataclass
class EvalConfig:
    """Probe targets and representation-metric knobs."""

    targets: tuple = DEFAULT_TARGETS
    ser_batch: int = 64
    ridge_grid: tuple = DEFAULT_ALPHA_GRID

    def validate(self) -> None:
        for pair in self.targets:
            if len(pair) != 2 or pair[1] not in TASKS:
                raise ConfigError(f"eval target must be [label, task], got {pair!r}")
        if self.ser_batch < 2:
            raise ConfigError(f"eval.ser_batch must be >= 2, got {self.ser_batch}")
        if len(self.ridge_grid) == 0:
            raise ConfigError("eval.ridge_grid must not be empty")
        for alpha in self.ridge_grid:
            if alpha < 0:
                raise ConfigError(f"eval.ridge_grid entries must be >= 0, got {alpha}")


@dataclass
class RunConfig:
    """Everything a run needs, resolved to concrete component configs.

    encoder_cfg/head_cfg may be None, meaning "size the desk preset to the
    corpus at hand"; policy None means the modality's default policy.
    """

    corpus: CorpusConfig
    policy: AugmentationPolicy | None
    encoder_cfg: EncoderConfig | None
    head_cfg: HeadConfig | None
    train: TrainConfig
    eval: EvalConfig = field(default_factory=EvalConfig)


def _parse_corpus(section: dict) -> CorpusConfig:
    _check_keys("corpus", section,
                ("modality", "channels", "sample_rate_hz", "segment_seconds",
                 "jitter", "n_participants", "segments_per_participant",
                 "seed", "split_fractions"))
    modality = section.get("modality", "ppg")
    if modality == "ppg":
        mod = ppg_modality()
    elif modality == "ecg":
        mod = ecg_modality()
    else:
        raise ConfigError(f"corpus.modality must be ppg or ecg, got {modality!r}")
    mod = ModalityConfig(
        mod.modality,
        _take(section, "channels", int, "corpus") or mod.channels,
        _take(section, "sample_rate_hz", float, "corpus") or mod.sample_rate_hz,
        _take(section, "segment_seconds", float, "corpus") or mod.segment_seconds,
        jitter if (jitter := _take(section, "jitter", float, "corpus")) is not None
        else mod.within_participant_jitter)
    fractions = section.get("split_fractions")
    if fractions is not None:
        if not isinstance(fractions, list) or len(fractions) != 3:
            raise ConfigError("corpus.split_fractions must be a 3-element list")
        fractions = tuple(float(f) for f in fractions)
    defaults = CorpusConfig(mod)
    cfg = CorpusConfig(
        mod,
        _take(section, "n_participants", int, "corpus") or defaults.n_participants,
        (_take(section, "segments_per_participant", int, "corpus")
         or defaults.segments_per_participant),
        seed if (seed := _take(section, "seed", int, "corpus")) is not None else 0,
        fractions or defaults.split_fractions)
    cfg.validate()
    return cfg


def _parse_policy(section: dict) -> AugmentationPolicy | None:
    _check_keys("augmentation", section, ("policy",))
    entries = section.get("policy")
    if entries is None:
        return None  # modality default, chosen when the run starts
    if not isinstance(entries, list):
        raise ConfigError("augmentation.policy must be a list of entries")
    specs = []
    for i, entry in enumerate(entries):
        where = f"augmentation.policy[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{where} must be an object")
        _check_keys(where, entry, ("kind", "probability", "params"))
        kind = entry.get("kind")
        if kind not in KIND_ORDER:
            raise ConfigError(f"{where}.kind must be one of {KIND_ORDER}, got {kind!r}")
        params = entry.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError(f"{where}.params must be an object")
        _check_keys(f"{where}.params", params, DEFAULT_PARAMS[kind])
        # range parameters arrive as JSON lists; the kernels expect tuples
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}
        probability = _take(entry, "probability", float, where)
        if probability is None:
            raise ConfigError(f"{where}.probability is required")
        specs.append(AugmentationSpec(kind, probability, params))
    policy = AugmentationPolicy(specs)
    policy.validate()
    return policy


def _parse_encoder(section: dict) -> tuple[EncoderConfig | None, HeadConfig | None]:
    _check_keys("encoder", section,
                ("preset", "in_channels", "stem_width", "blocks",
                 "embedding_dim", "head_hidden_dim", "head_output_dim"))
    preset = section.get("preset")
    explicit = set(section) - {"preset", "in_channels"}
    if preset is not None and explicit:
        raise ConfigError(f"encoder.preset excludes explicit keys {sorted(explicit)}")
    if preset is not None:
        if preset not in ENCODER_PRESETS:
            raise ConfigError(f"encoder.preset must be one of "
                              f"{sorted(ENCODER_PRESETS)}, got {preset!r}")
        if "in_channels" not in section:
            return None, None  # sized to the corpus when the run starts
        make_encoder, make_head = ENCODER_PRESETS[preset]
        enc = make_encoder(_take(section, "in_channels", int, "encoder"))
        return enc, make_head(enc.embedding_dim)
    if not section:
        return None, None
    required = ("in_channels", "stem_width", "blocks", "embedding_dim")
    missing = [k for k in required if k not in section]
    if missing:
        raise ConfigError(f"explicit encoder needs keys {missing}")
    blocks = []
    for i, raw in enumerate(section["blocks"]):
        where = f"encoder.blocks[{i}]"
        if not isinstance(raw, dict):
            raise ConfigError(f"{where} must be an object")
        _check_keys(where, raw, ("out_width", "kernel", "stride", "expansion",
                                 "se_ratio"))
        try:
            block = BlockSpec(**raw)
            block.validate()
        except (TypeError, ValueError) as err:
            raise ConfigError(f"{where}: {err}") from err
        blocks.append(block)
    enc = EncoderConfig(_take(section, "in_channels", int, "encoder"),
                        _take(section, "stem_width", int, "encoder"),
                        blocks,
                        _take(section, "embedding_dim", int, "encoder"))
    enc.validate()
    head = HeadConfig(enc.embedding_dim,
                      _take(section, "head_hidden_dim", int, "encoder") or 128,
                      _take(section, "head_output_dim", int, "encoder") or 32)
    head.validate()
    return enc, head


def _parse_loss(section: dict) -> LossConfig:
    _check_keys("loss", section,
                ("temperature", "koleo_weight", "koleo_eps", "halve_terms"))
    defaults = LossConfig()
    cfg = LossConfig(
        t if (t := _take(section, "temperature", float, "loss")) is not None
        else defaults.temperature,
        w if (w := _take(section, "koleo_weight", float, "loss")) is not None
        else defaults.koleo_weight,
        e if (e := _take(section, "koleo_eps", float, "loss")) is not None
        else defaults.koleo_eps,
        h if (h := _take(section, "halve_terms", bool, "loss")) is not None
        else defaults.halve_terms)
    cfg.validate()
    return cfg


def _parse_train(section: dict, loss: LossConfig) -> TrainConfig:
    _check_keys("train", section,
                ("framework", "pair_mode", "batch_pairs", "lr", "momentum_rate",
                 "epochs", "seed", "schedule"))
    framework = section.get("framework", "ours")
    if framework not in FRAMEWORKS:
        raise ConfigError(f"train.framework must be one of {FRAMEWORKS}, "
                          f"got {framework!r}")
    pair_mode = section.get("pair_mode", "participant")
    if pair_mode not in PAIR_MODES:
        raise ConfigError(f"train.pair_mode must be one of {PAIR_MODES}, "
                          f"got {pair_mode!r}")
    step_epochs, factor = None, 0.5
    schedule = section.get("schedule")
    if schedule is not None:
        if not isinstance(schedule, dict):
            raise ConfigError("train.schedule must be an object")
        _check_keys("train.schedule", schedule, ("step_epochs", "factor"))
        step_epochs = _take(schedule, "step_epochs", int, "train.schedule")
        f = _take(schedule, "factor", float, "train.schedule")
        factor = f if f is not None else factor
    defaults = TrainConfig()
    cfg = TrainConfig(
        framework=framework,
        pair_mode=pair_mode,
        batch_pairs=_take(section, "batch_pairs", int, "train") or defaults.batch_pairs,
        lr=_take(section, "lr", float, "train"),
        momentum_rate=m if (m := _take(section, "momentum_rate", float, "train"))
        is not None else defaults.momentum_rate,
        epochs=_take(section, "epochs", int, "train") or defaults.epochs,
        seed=s if (s := _take(section, "seed", int, "train")) is not None else 0,
        lr_step_epochs=step_epochs,
        lr_step_factor=factor,
        loss=loss)
    cfg.validate()
    return cfg


def _parse_eval(section: dict) -> EvalConfig:
    _check_keys("eval", section, ("targets", "ser_batch", "ridge_grid"))
    defaults = EvalConfig()
    targets = section.get("targets")
    if targets is not None:
        if not isinstance(targets, list):
            raise ConfigError("eval.targets must be a list of [label, task] pairs")
        targets = tuple(tuple(pair) for pair in targets)
    grid = section.get("ridge_grid")
    if grid is not None:
        if not isinstance(grid, list) or not grid:
            raise ConfigError("eval.ridge_grid must be a non-empty list")
        grid = tuple(float(a) for a in grid)
    cfg = EvalConfig(targets if targets is not None else defaults.targets,
                     _take(section, "ser_batch", int, "eval") or defaults.ser_batch,
                     grid if grid is not None else defaults.ridge_grid)
    cfg.validate()
    return cfg


def parse_run_config(document: dict) -> RunConfig:
    """Strictly validated RunConfig from a parsed JSON document."""
    if not isinstance(document, dict):
        raise ConfigError("run config must be a JSON object")
    _check_keys("run config", document, SECTIONS)
    for name in SECTIONS:
        if name in document and not isinstance(document[name], dict):
            raise ConfigError(f"section {name} must be an object")
    corpus = _parse_corpus(document.get("corpus", {}))
    policy = _parse_policy(document.get("augmentation", {}))
    encoder_cfg, head_cfg = _parse_encoder(document.get("encoder", {}))
    loss = _parse_loss(document.get("loss", {}))
    train = _parse_train(document.get("train", {}), loss)
    eval_cfg = _parse_eval(document.get("eval", {}))
    return RunConfig(corpus, policy, encoder_cfg, head_cfg, train, eval_cfg)


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            document = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    return parse_run_config(document)


def resolved_document(cfg: RunConfig) -> dict:
    """The fully resolved config as a plain JSON-serializable document."""
    mod = cfg.corpus.modality
    doc: dict = {
        "corpus": {
            "modality": mod.modality,
            "channels": mod.channels,
            "sample_rate_hz": mod.sample_rate_hz,
            "segment_seconds": mod.segment_seconds,
            "jitter": mod.within_participant_jitter,
            "n_participants": cfg.corpus.n_participants,
            "segments_per_participant": cfg.corpus.segments_per_participant,
            "seed": cfg.corpus.seed,
            "split_fractions": list(cfg.corpus.split_fractions),
        },
        "augmentation": {"policy": None if cfg.policy is None else [
            {"kind": e.kind, "probability": e.probability,
             "params": {k: list(v) if isinstance(v, tuple) else v
                        for k, v in e.params.items()}}
            for e in cfg.policy.entries]},
        "loss": {
            "temperature": cfg.train.loss.temperature,
            "koleo_weight": cfg.train.loss.koleo_weight,
            "koleo_eps": cfg.train.loss.koleo_eps,
            "halve_terms": cfg.train.loss.halve_terms,
        },
        "train": {
            "framework": cfg.train.framework,
            "pair_mode": cfg.train.pair_mode,
            "batch_pairs": cfg.train.batch_pairs,
            "lr": cfg.train.resolved_lr,
            "momentum_rate": cfg.train.momentum_rate,
            "epochs": cfg.train.epochs,
            "seed": cfg.train.seed,
            "schedule": {"step_epochs": cfg.train.resolved_step_epochs,
                         "factor": cfg.train.lr_step_factor},
        },
        "eval": {
            "targets": [list(pair) for pair in cfg.eval.targets],
            "ser_batch": cfg.eval.ser_batch,
            "ridge_grid": list(cfg.eval.ridge_grid),
        },
    }
    if cfg.encoder_cfg is None:
        doc["encoder"] = {"preset": "desk"}
    else:
        enc, head = cfg.encoder_cfg, cfg.head_cfg
        doc["encoder"] = {
            "in_channels": enc.in_channels,
            "stem_width": enc.stem_width,
            "blocks": [{"out_width": b.out_width, "kernel": b.kernel,
                        "stride": b.stride, "expansion": b.expansion,
                        "se_ratio": b.se_ratio} for b in enc.blocks],
            "embedding_dim": enc.embedding_dim,
            "head_hidden_dim": head.hidden_dim,
            "head_output_dim": head.output_dim,
        }
    return doc


def echo_config(cfg: RunConfig, out_dir) -> None:
    """Write the resolved config into an output directory for provenance."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.json", "w") as fh:
        json.dump(resolved_document(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")

"""Seeded synthetic corpus of multi-channel 1D biosignal segments.

Each participant is a latent draw (resting rate, rate variability, six
morphology factors, noise level) that fixes a personal waveform; segments
are quasi-periodic renderings of that waveform with per-segment variation
gated by the modality's within-participant jitter. Two pulse-shaped
modalities are provided: a four-channel optical pulse signal (shared pulse,
channel-specific gain and noise) and a single-channel electrical cardiac
signal built from a sum-of-Gaussians beat template.

Segments are beat-aligned at their start and z-scored per channel, so
with jitter 0 and noise 0 the same participant renders identically.
Surrogate targets derive from the latents: age falls with resting rate
and rises with two morphology factors, sex is a coin with logistic odds
in one factor, body-mass index is affine in pulse width and amplitude
ratio. All randomness is keyed by (corpus_seed, stream, participant,
segment), making generation order-independent and reproducible.

On disk a corpus is a directory: manifest.json (config, counts, CRC-32
checksums), segments.bin (little-endian float32, one [C, L] row-major
block per segment), index.csv (segment_id, participant_id, split,
byte_offset), labels.csv (one row per participant).
"""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .rngs import substream

FORMAT_VERSION = 1

# Stream tags namespace the per-corpus seed.
_STREAM_PARTICIPANT = 1
_STREAM_SEGMENT = 2
_STREAM_SPLIT = 3

SPLITS = ("train", "val", "test")

LABEL_COLUMNS = ("participant_id", "pseudo_age", "pseudo_bmi", "pseudo_sex",
                 "base_heart_rate_bpm", "hr_variability", "noise_level",
                 "morphology_0", "morphology_1", "morphology_2",
                 "morphology_3", "morphology_4", "morphology_5")


@dataclass
class ModalityConfig:
    """Sampling geometry and difficulty of one signal modality."""

    modality: str
    channels: int
    sample_rate_hz: float
    segment_seconds: float
    within_participant_jitter: float

    @property
    def segment_length(self) -> int:
        return int(round(self.sample_rate_hz * self.segment_seconds))

    def validate(self) -> None:
        if self.modality not in ("ppg", "ecg"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.channels < 1 or self.sample_rate_hz <= 0 or self.segment_seconds <= 0:
            raise ValueError(f"invalid modality geometry {self}")
        if not 0.0 <= self.within_participant_jitter <= 1.0:
            raise ValueError(f"within_participant_jitter must lie in [0, 1], "
                             f"got {self.within_participant_jitter}")
        if self.modality == "ecg" and self.channels != 1:
            raise ValueError("ecg modality is single-channel")


def ppg_modality(segment_seconds: float = 8.0, jitter: float = 0.6) -> ModalityConfig:
    """Four correlated optical channels at 64 Hz; high within-participant jitter."""
    return ModalityConfig("ppg", 4, 64.0, segment_seconds, jitter)


def ecg_modality(segment_seconds: float = 8.0, jitter: float = 0.2) -> ModalityConfig:
    """One electrical channel at 128 Hz; low within-participant jitter."""
    return ModalityConfig("ecg", 1, 128.0, segment_seconds, jitter)


@dataclass
class ParticipantLatent:
    participant_id: int
    base_heart_rate_bpm: float
    hr_variability: float
    morphology: np.ndarray  # six standard-normal shape factors
    noise_level: float
    channel_gains: np.ndarray  # fixed per-channel gain factors (up to 4 channels)


def draw_participant(corpus_seed: int, participant_id: int) -> ParticipantLatent:
    """Latent physiology for one participant; a pure function of the key."""
    r = substream(corpus_seed, _STREAM_PARTICIPANT, participant_id)
    hr = float(r.uniform(50.0, 100.0))
    hrv = float(r.uniform(0.01, 0.04))
    morphology = r.normal(0.0, 1.0, size=6)
    noise_level = float(r.uniform(0.05, 0.3))
    gains = 1.0 + 0.15 * r.normal(0.0, 1.0, size=4)
    return ParticipantLatent(participant_id, hr, hrv, morphology, noise_level, gains)


def participant_labels(latent: ParticipantLatent, corpus_seed: int) -> dict:
    """Surrogate targets derived from the latents with seeded label noise.

    pseudo_age is affine in resting rate (negative slope) and morphology
    factors 0 and 3; pseudo_sex is Bernoulli with logistic odds in factor 1;
    pseudo_bmi is affine in the pulse-width factor 2 and amplitude-ratio
    factor 4.
    """
    r = substream(corpus_seed, _STREAM_PARTICIPANT, latent.participant_id, 1)
    m = latent.morphology
    age = (54.0 - 0.5 * (latent.base_heart_rate_bpm - 75.0)
           + 6.0 * m[0] + 4.0 * m[3] + 2.5 * float(r.normal()))
    p_sex = 1.0 / (1.0 + math.exp(-2.2 * m[1]))
    sex = int(r.uniform() < p_sex)
    bmi = 26.5 + 3.0 * m[2] + 2.0 * m[4] + 1.5 * float(r.normal())
    return {"pseudo_age": age, "pseudo_sex": sex, "pseudo_bmi": bmi}


# ---------------------------------------------------------------------------
# waveform synthesis
# ---------------------------------------------------------------------------

def _gauss_train(phase: np.ndarray, components) -> np.ndarray:
    """Sum of Gaussians over cyclic phase in [0, 1); wrapped copies keep the
    template continuous at beat boundaries."""
    out = np.zeros_like(phase)
    for center, width, amp in components:
        for shift in (-1.0, 0.0, 1.0):
            d = phase - (center + shift)
            out += amp * np.exp(-0.5 * (d / width) ** 2)
    return out


def _ecg_components(m: np.ndarray):
    """P-Q-R-S-T as (phase center, phase width, amplitude), shaped by the
    morphology factors that also drive the surrogate targets. T amplitude is
    a bounded fraction of R so R stays the tallest peak of every beat."""
    qrs_w = 1.0 + 0.08 * m[2]
    r_amp = 1.00 * (1.0 + 0.12 * m[0])
    return [
        (0.16, 0.040, 0.13 * (1.0 + 0.20 * m[4])),   # P
        (0.27, 0.014 * qrs_w, -0.14),                # Q
        (0.30, 0.018 * qrs_w, r_amp),                # R
        (0.33, 0.014 * qrs_w, -0.28 * (1.0 + 0.10 * m[1])),  # S
        (0.55, 0.070 * (1.0 + 0.10 * m[5]), 0.33 * r_amp * (1.0 + 0.10 * m[3])),  # T
    ]


def _ppg_components(m: np.ndarray):
    """Systolic peak plus delayed diastolic reflection; the trough between
    them forms the dicrotic notch."""
    notch_delay = 0.26 * (1.0 + 0.06 * m[1])
    return [
        (0.23, 0.085 * (1.0 + 0.10 * m[2]), 1.00 * (1.0 + 0.10 * m[0])),
        (0.23 + notch_delay, 0.110 * (1.0 + 0.08 * m[5]),
         0.45 * (1.0 + 0.18 * m[4]) * (1.0 + 0.05 * m[3])),
    ]


def synthesize_segment(latent: ParticipantLatent, modality: ModalityConfig,
                       corpus_seed: int, segment_index: int) -> np.ndarray:
    """One z-scored [channels, length] float32 segment.

    Every per-segment stochastic term (rate offset, beat-interval wander,
    amplitude, baseline drift, channel gain wobble, additive noise) scales
    with the modality jitter; noise additionally scales with the
    participant noise level. Jitter 0 renders every segment of a
    participant identically.
    """
    r = substream(corpus_seed, _STREAM_SEGMENT, latent.participant_id, segment_index)
    j = modality.within_participant_jitter
    length = modality.segment_length
    duration = modality.segment_seconds

    rate_scale = 1.0 + 0.01 * j * float(np.clip(r.normal(), -3.0, 3.0))
    amp_scale = 1.0 + 0.35 * j * float(np.clip(r.normal(), -2.5, 2.5))
    drift_rel = 0.8 * j * min(abs(float(r.normal())), 2.5)
    drift_freq = float(r.uniform(0.05, 0.25))
    drift_phase = float(r.uniform(0.0, 2.0 * math.pi))

    # Beat onsets jitter around a regular grid rather than accumulating, so
    # two segments of one participant stay loosely phase-locked; |jit| < 0.25
    # of an interval keeps onsets strictly increasing.
    interval = 60.0 / latent.base_heart_rate_bpm * rate_scale
    n_beats = int(math.ceil(duration / interval)) + 2
    jit = latent.hr_variability * j * np.clip(r.normal(size=n_beats + 1), -3.0, 3.0)
    jit[0] = 0.0
    onsets = (np.arange(n_beats + 1) + jit) * interval
    intervals = np.diff(onsets)

    t = np.arange(length) / modality.sample_rate_hz
    beat = np.searchsorted(onsets, t, side="right") - 1
    phase = (t - onsets[beat]) / intervals[beat]

    components = _ecg_components(latent.morphology) if modality.modality == "ecg" \
        else _ppg_components(latent.morphology)
    wobble = 1.0 + 0.15 * j * np.clip(r.normal(size=len(components)), -2.5, 2.5)
    components = [(c, w, a * float(s)) for (c, w, a), s in zip(components, wobble)]
    pulse = amp_scale * _gauss_train(phase, components)

    # Drift and noise scale with the rendered pulse RMS so noise_level acts
    # as a noise-to-signal ratio regardless of how sparse the waveform is.
    pulse_rms = float(np.sqrt(np.mean(pulse ** 2)))
    drift = drift_rel * pulse_rms * np.sin(2.0 * math.pi * drift_freq * t + drift_phase)
    sigma = latent.noise_level * j * pulse_rms
    seg = np.empty((modality.channels, length), dtype=np.float64)
    for c in range(modality.channels):
        gain = latent.channel_gains[c] * (1.0 + 0.15 * j * float(np.clip(r.normal(), -2.5, 2.5)))
        noise = sigma * r.normal(size=length) if sigma > 0 else 0.0
        seg[c] = gain * (pulse + drift) + noise

    mean = seg.mean(axis=1, keepdims=True)
    std = seg.std(axis=1, keepdims=True)
    if np.any(std < 1e-8):
        raise ValueError("degenerate constant channel in synthesized segment")
    return ((seg - mean) / std).astype(np.float32)


# ---------------------------------------------------------------------------
# corpus assembly, persistence, loading
# ---------------------------------------------------------------------------

@dataclass
class CorpusConfig:
    modality: ModalityConfig
    n_participants: int = 200
    segments_per_participant: int = 20
    seed: int = 0
    split_fractions: tuple = (0.8, 0.1, 0.1)

    def validate(self) -> None:
        self.modality.validate()
        if self.n_participants < 10:
            raise ValueError(f"need at least 10 participants, got {self.n_participants}")
        if self.segments_per_participant < 4:
            raise ValueError("need at least 4 segments per participant")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        f = self.split_fractions
        if len(f) != 3 or any(x <= 0 for x in f) or abs(sum(f) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be 3 positive values summing to 1, got {f}")


class Corpus:
    """In-memory corpus: segment array plus aligned id/split columns and
    per-participant labels."""

    def __init__(self, config: CorpusConfig, segments: np.ndarray,
                 segment_ids: np.ndarray, participant_ids: np.ndarray,
                 splits: np.ndarray, labels: dict):
        self.config = config
        self.segments = segments
        self.segment_ids = segment_ids
        self.participant_ids = participant_ids
        self.splits = splits
        self.labels = labels  # column name -> array over sorted participants

    @property
    def n_segments(self) -> int:
        return self.segments.shape[0]

    def indices_for_split(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.flatnonzero(self.splits == split)

    def participants_in_split(self, split: str) -> np.ndarray:
        return np.unique(self.participant_ids[self.indices_for_split(split)])

    def label_for_participants(self, column: str, participant_ids: np.ndarray) -> np.ndarray:
        if column not in self.labels:
            raise ValueError(f"unknown label column {column!r}")
        lookup = {int(p): i for i, p in enumerate(self.labels["participant_id"])}
        rows = np.array([lookup[int(p)] for p in participant_ids])
        return self.labels[column][rows]


def assign_splits(config: CorpusConfig) -> dict[int, str]:
    """Deterministic participant-level split from the corpus seed."""
    r = substream(config.seed, _STREAM_SPLIT)
    order = r.permutation(config.n_participants)
    n = config.n_participants
    n_train = int(round(config.split_fractions[0] * n))
    n_val = int(round(config.split_fractions[1] * n))
    n_val = max(1, min(n_val, n - n_train - 1))
    out = {}
    for rank, pid in enumerate(order):
        if rank < n_train:
            out[int(pid)] = "train"
        elif rank < n_train + n_val:
            out[int(pid)] = "val"
        else:
            out[int(pid)] = "test"
    return out


def generate_corpus(config: CorpusConfig) -> Corpus:
    """Render every segment and label table for the configured corpus."""
    config.validate()
    modality = config.modality
    n_seg = config.n_participants * config.segments_per_participant
    segments = np.empty((n_seg, modality.channels, modality.segment_length), dtype=np.float32)
    segment_ids = np.arange(n_seg, dtype=np.int64)
    participant_ids = np.empty(n_seg, dtype=np.int64)
    split_of = assign_splits(config)
    splits = np.empty(n_seg, dtype=object)

    label_cols: dict[str, list] = {k: [] for k in LABEL_COLUMNS}

    row = 0
    for pid in range(config.n_participants):
        latent = draw_participant(config.seed, pid)
        targets = participant_labels(latent, config.seed)
        label_cols["participant_id"].append(pid)
        label_cols["pseudo_age"].append(targets["pseudo_age"])
        label_cols["pseudo_sex"].append(targets["pseudo_sex"])
        label_cols["pseudo_bmi"].append(targets["pseudo_bmi"])
        label_cols["base_heart_rate_bpm"].append(latent.base_heart_rate_bpm)
        label_cols["hr_variability"].append(latent.hr_variability)
        label_cols["noise_level"].append(latent.noise_level)
        for i in range(6):
            label_cols[f"morphology_{i}"].append(float(latent.morphology[i]))
        for k in range(config.segments_per_participant):
            segments[row] = synthesize_segment(latent, modality, config.seed, k)
            participant_ids[row] = pid
            splits[row] = split_of[pid]
            row += 1

    labels = {k: np.asarray(v) for k, v in label_cols.items()}
    return Corpus(config, segments, segment_ids, participant_ids,
                  splits.astype(str), labels)


def _crc32_of(path: Path) -> int:
    crc = 0
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            crc = zlib.crc32(chunk, crc)
    return crc


def save_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    modality = corpus.config.modality
    seg_bytes = modality.channels * modality.segment_length * 4

    blob = corpus.segments.astype("<f4", copy=False)
    blob.tofile(out / "segments.bin")

    with open(out / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment_id", "participant_id", "split", "byte_offset"])
        for i in range(corpus.n_segments):
            writer.writerow([int(corpus.segment_ids[i]), int(corpus.participant_ids[i]),
                             corpus.splits[i], i * seg_bytes])

    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABEL_COLUMNS)
        for i in range(len(corpus.labels["participant_id"])):
            row = []
            for col in LABEL_COLUMNS:
                v = corpus.labels[col][i]
                row.append(int(v) if col in ("participant_id", "pseudo_sex") else repr(float(v)))
            writer.writerow(row)

    manifest = {
        "format_version": FORMAT_VERSION,
        "modality": asdict(modality),
        "n_participants": corpus.config.n_participants,
        "segments_per_participant": corpus.config.segments_per_participant,
        "n_segments": corpus.n_segments,
        "segment_shape": [modality.channels, modality.segment_length],
        "seed": corpus.config.seed,
        "split_fractions": list(corpus.config.split_fractions),
        "files": {name: {"bytes": (out / name).stat().st_size,
                         "crc32": _crc32_of(out / name)}
                  for name in ("segments.bin", "index.csv", "labels.csv")},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_corpus(corpus_dir) -> Corpus:
    """Load and verify a corpus directory; raises on checksum or shape drift."""
    root = Path(corpus_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ValueError(f"no corpus manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported corpus format version {manifest.get('format_version')}")

    for name, meta in manifest["files"].items():
        path = root / name
        if not path.exists():
            raise ValueError(f"corpus file missing: {name}")
        size = path.stat().st_size
        if size != meta["bytes"]:
            raise ValueError(f"corpus file {name} is {size} bytes, manifest says {meta['bytes']}")
        crc = _crc32_of(path)
        if crc != meta["crc32"]:
            raise ValueError(f"checksum mismatch for {name}")

    modality = ModalityConfig(**manifest["modality"])
    config = CorpusConfig(modality, manifest["n_participants"],
                          manifest["segments_per_participant"], manifest["seed"],
                          tuple(manifest["split_fractions"]))
    channels, length = manifest["segment_shape"]
    n_seg = manifest["n_segments"]

    data = np.fromfile(root / "segments.bin", dtype="<f4")
    if data.size != n_seg * channels * length:
        raise ValueError(f"segment blob holds {data.size} values, "
                         f"expected {n_seg * channels * length}")
    segments = data.reshape(n_seg, channels, length)

    segment_ids = np.empty(n_seg, dtype=np.int64)
    participant_ids = np.empty(n_seg, dtype=np.int64)
    splits = np.empty(n_seg, dtype=object)
    with open(root / "index.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        for i, row_dict in enumerate(reader):
            if i >= n_seg:
                raise ValueError("index.csv has more rows than the manifest declares")
            segment_ids[i] = int(row_dict["segment_id"])
            participant_ids[i] = int(row_dict["participant_id"])
            splits[i] = row_dict["split"]
            expected = i * channels * length * 4
            if int(row_dict["byte_offset"]) != expected:
                raise ValueError(f"byte offset of segment {i} is {row_dict['byte_offset']}, "
                                 f"expected {expected}")

    labels: dict[str, list] = {col: [] for col in LABEL_COLUMNS}
    with open(root / "labels.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LABEL_COLUMNS:
            raise ValueError("labels.csv columns do not match the corpus schema")
        for row_dict in reader:
            for col in LABEL_COLUMNS:
                cast = int if col in ("participant_id", "pseudo_sex") else float
                labels[col].append(cast(row_dict[col]))

    return Corpus(config, segments, segment_ids, participant_ids,
                  splits.astype(str), {k: np.asarray(v) for k, v in labels.items()})

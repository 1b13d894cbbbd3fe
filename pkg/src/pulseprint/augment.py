"""Stochastic time-series augmentations for [channels, length] segments.

Five distortions with seeded randomness: zeroing a contiguous window,
multiplying by a smooth random gain curve, adding Gaussian noise, permuting
channels, and resampling along a smooth monotone time remap. A policy lists
(kind, probability, hyperparameter ranges) entries and applies them as
independent Bernoulli draws in one fixed order, so a policy plus an RNG
state fully determines the output.

Each distortion splits into a deterministic kernel taking explicit
parameters (used directly by tests) and a sampling wrapper that draws those
parameters from the configured ranges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

KIND_ORDER = ("cut_out", "magnitude_warp", "gaussian_noise", "channel_permute", "time_warp")

DEFAULT_PARAMS = {
    "cut_out": {"fraction_range": (0.1, 0.5)},
    "magnitude_warp": {"knots": 4, "std": 0.2},
    "gaussian_noise": {"sigma_range": (0.05, 0.25)},
    "channel_permute": {},
    "time_warp": {"knots": 4, "std": 0.1, "max_retries": 10},
}


# ---------------------------------------------------------------------------
# deterministic kernels
# ---------------------------------------------------------------------------

def apply_cut_out(segment: np.ndarray, start: int, width: int) -> np.ndarray:
    out = segment.copy()
    out[:, start:start + width] = 0.0
    return out


def warp_curve(length: int, knot_values: np.ndarray) -> np.ndarray:
    """Cubic curve through knot values spread evenly over [0, length-1]."""
    knot_values = np.asarray(knot_values, dtype=np.float64)
    if len(knot_values) < 3:
        raise ValueError("warp needs at least 3 knots")
    positions = np.linspace(0.0, length - 1.0, len(knot_values))
    return CubicSpline(positions, knot_values)(np.arange(length))


def apply_magnitude_warp(segment: np.ndarray, knot_values) -> np.ndarray:
    curve = warp_curve(segment.shape[1], knot_values)
    return (segment * curve[None, :]).astype(segment.dtype)


def apply_channel_permute(segment: np.ndarray, permutation) -> np.ndarray:
    permutation = np.asarray(permutation)
    if sorted(permutation.tolist()) != list(range(segment.shape[0])):
        raise ValueError(f"not a permutation of {segment.shape[0]} channels: {permutation}")
    return segment[permutation].copy()


def apply_time_warp(segment: np.ndarray, source_positions: np.ndarray) -> np.ndarray:
    """Resample so output index i reads from fractional input position
    source_positions[i], linearly interpolated."""
    length = segment.shape[1]
    if source_positions.shape != (length,):
        raise ValueError("source positions must cover every output index")
    grid = np.arange(length)
    out = np.empty_like(segment)
    for c in range(segment.shape[0]):
        out[c] = np.interp(source_positions, grid, segment[c].astype(np.float64))
    return out


# ---------------------------------------------------------------------------
# sampling wrappers
# ---------------------------------------------------------------------------

def cut_out(segment, rng, fraction_range=(0.1, 0.5)):
    lo, hi = fraction_range
    if not (0.0 < lo <= hi < 1.0):
        raise ValueError(f"window fraction range must sit inside (0, 1), got {fraction_range}")
    length = segment.shape[1]
    frac = rng.uniform(lo, hi)
    width = max(1, int(round(frac * length)))
    start = int(rng.integers(0, length - width + 1))
    return apply_cut_out(segment, start, width)


def magnitude_warp(segment, rng, knots=4, std=0.2):
    if knots < 3:
        raise ValueError("magnitude warp needs at least 3 knots")
    if std < 0:
        raise ValueError("warp std must be non-negative")
    values = 1.0 + std * rng.normal(size=knots)
    return apply_magnitude_warp(segment, values)


def gaussian_noise(segment, rng, sigma_range=(0.05, 0.25)):
    lo, hi = sigma_range
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid noise sigma range {sigma_range}")
    sigma = rng.uniform(lo, hi)
    noise = sigma * rng.normal(size=segment.shape)
    return (segment + noise).astype(segment.dtype)


def channel_permute(segment, rng):
    if segment.shape[0] < 2:
        raise ValueError("channel permutation needs at least 2 channels")
    return apply_channel_permute(segment, rng.permutation(segment.shape[0]))


def time_warp_remap(length, rng, knots=4, std=0.1, max_retries=10):
    """Strictly increasing source-position curve over [0, length-1].

    Interior knots of the identity line are perturbed by std times the knot
    spacing; draws whose cubic interpolant is not strictly increasing over
    the full grid are rejected and redrawn a bounded number of times.
    """
    if knots < 3:
        raise ValueError("time warp needs at least 3 knots")
    positions = np.linspace(0.0, length - 1.0, knots)
    spacing = positions[1] - positions[0]
    for _ in range(max_retries + 1):
        perturbed = positions.copy()
        perturbed[1:-1] += std * spacing * rng.normal(size=knots - 2)
        if np.any(np.diff(perturbed) <= 0):
            continue
        source = CubicSpline(positions, perturbed)(np.arange(length))
        source = np.clip(source, 0.0, length - 1.0)
        if np.all(np.diff(source) > 0):
            return source
    raise RuntimeError(f"no monotone time remap after {max_retries} retries")


def time_warp(segment, rng, knots=4, std=0.1, max_retries=10):
    source = time_warp_remap(segment.shape[1], rng, knots, std, max_retries)
    return apply_time_warp(segment, source)


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

_WRAPPERS = {
    "cut_out": cut_out,
    "magnitude_warp": magnitude_warp,
    "gaussian_noise": gaussian_noise,
    "channel_permute": channel_permute,
    "time_warp": time_warp,
}


@dataclass
class AugmentationSpec:
    kind: str
    probability: float
    params: dict = field(default_factory=dict)


@dataclass
class AugmentationPolicy:
    entries: list

    def validate(self, channels: int | None = None) -> None:
        kinds = [e.kind for e in self.entries]
        for kind in kinds:
            if kind not in KIND_ORDER:
                raise ValueError(f"unknown augmentation kind {kind!r}")
        if len(set(kinds)) != len(kinds):
            raise ValueError("duplicate augmentation kinds in policy")
        order = [KIND_ORDER.index(k) for k in kinds]
        if order != sorted(order):
            raise ValueError(f"augmentation entries must follow the fixed order {KIND_ORDER}")
        for e in self.entries:
            if not 0.0 <= e.probability <= 1.0:
                raise ValueError(f"probability of {e.kind} outside [0, 1]: {e.probability}")
            unknown = set(e.params) - set(DEFAULT_PARAMS[e.kind])
            if unknown:
                raise ValueError(f"unknown parameters for {e.kind}: {sorted(unknown)}")
        if channels is not None and channels < 2 and "channel_permute" in kinds:
            raise ValueError("channel permutation in a policy for single-channel segments")


def default_policy(modality: str) -> AugmentationPolicy:
    if modality == "ppg":
        probs = {"cut_out": 0.4, "magnitude_warp": 0.25, "gaussian_noise": 0.25,
                 "channel_permute": 0.25, "time_warp": 0.15}
    elif modality == "ecg":
        probs = {"cut_out": 0.8, "magnitude_warp": 0.5, "gaussian_noise": 0.5,
                 "time_warp": 0.3}
    else:
        raise ValueError(f"no default augmentation policy for modality {modality!r}")
    entries = [AugmentationSpec(kind, probs[kind]) for kind in KIND_ORDER if kind in probs]
    return AugmentationPolicy(entries)


def apply_policy(segment: np.ndarray, policy: AugmentationPolicy, rng) -> np.ndarray:
    """Bernoulli-gated cascade of the policy's augmentations, in order."""
    if segment.ndim != 2:
        raise ValueError(f"segment must be [channels, length], got shape {segment.shape}")
    if segment.shape[1] < 16:
        raise ValueError(f"segment too short to augment: length {segment.shape[1]}")
    policy.validate(channels=segment.shape[0])
    out = segment.copy()
    for entry in policy.entries:
        if rng.uniform() < entry.probability:
            params = {**DEFAULT_PARAMS[entry.kind], **entry.params}
            out = _WRAPPERS[entry.kind](out, rng, **params)
    return out

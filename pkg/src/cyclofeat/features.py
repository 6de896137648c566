"""Gini coefficient and the nine cyclostationary descriptors X1..X9."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .audio_synth import AudioClip
from .cyclo_spectral import (
    CyclicProfile,
    ScdGrid,
    ScdMatrix,
    Spectrum,
    cyclic_profiles,
    decimate,
    dft_spectrum,
    estimate_scd_from_spectrum,
)
from .errors import InvalidParameterError, MalformedInputError, UndefinedStatisticError

FEATURE_NAMES = tuple(f"x{i}" for i in range(1, 10))


def gini(values) -> float:
    """
    Gini coefficient of a non-negative sample.

    Uses the ascending order-statistic identity
    ``G = sum_k (2k - n - 1) x_(k) / (n * sum x)``, which equals the
    normalised mean absolute difference ``sum_ij |x_i - x_j| / (2 n sum x)``.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise UndefinedStatisticError("Gini coefficient of an empty set is undefined")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise InvalidParameterError("Gini coefficient needs finite non-negative values")
    total = x.sum()
    if total <= 0:
        raise UndefinedStatisticError("Gini coefficient of an all-zero set is undefined")
    n = x.size
    k = np.arange(1, n + 1)
    g = float(np.dot(2 * k - n - 1, np.sort(x)) / (n * total))
    # equal values can round a hair below zero
    return max(g, 0.0)


@dataclass(frozen=True)
class FeatureVector:
    """
    x1..x3: mean, variance, Gini of the max-over-f profile;
    x4..x6: the same for the mean-over-f profile;
    x7..x9: the same for the spectrum magnitude.
    """

    x1: float
    x2: float
    x3: float
    x4: float
    x5: float
    x6: float
    x7: float
    x8: float
    x9: float
    clip_label: str = ""

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES])

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in FEATURE_NAMES}

    @classmethod
    def from_values(cls, values: Sequence[float], clip_label: str = "") -> "FeatureVector":
        if len(values) != 9:
            raise InvalidParameterError(f"expected 9 feature values, got {len(values)}")
        return cls(*(float(v) for v in values), clip_label=clip_label)


def _describe(values: np.ndarray, names: tuple[str, str, str]):
    if values.size == 0:
        raise UndefinedStatisticError(f"{names[0]}: no values to summarise")
    try:
        g = gini(values)
    except UndefinedStatisticError:
        raise UndefinedStatisticError(f"{names[2]}: Gini coefficient undefined for an all-zero profile") from None
    # population variance
    return float(values.mean()), float(values.var()), g


def extract_features(profile: CyclicProfile) -> FeatureVector:
    """
    X1..X6 over the alpha > 0 part of the cyclic profiles, X7..X9 over the
    spectrum magnitude without its DC bin.
    """
    cyclic = np.asarray(profile.cyclic, dtype=bool)
    if cyclic.sum() < 2:
        raise InvalidParameterError("profile needs at least two alpha > 0 entries")
    x1, x2, x3 = _describe(np.asarray(profile.d_max)[cyclic], ("x1", "x2", "x3"))
    x4, x5, x6 = _describe(np.asarray(profile.d_mean)[cyclic], ("x4", "x5", "x6"))
    x7, x8, x9 = _describe(np.asarray(profile.spectrum_mag)[1:], ("x7", "x8", "x9"))
    return FeatureVector(x1, x2, x3, x4, x5, x6, x7, x8, x9, clip_label=profile.label)


def average_features(vectors: Sequence[FeatureVector], clip_label: str | None = None) -> FeatureVector:
    """Element-wise mean, used to merge the per-channel vectors of a stereo clip."""
    if not vectors:
        raise InvalidParameterError("nothing to average")
    mean = np.mean([v.as_array() for v in vectors], axis=0)
    return FeatureVector.from_values(mean, clip_label if clip_label is not None else vectors[0].clip_label)


@dataclass(frozen=True)
class ChannelAnalysis:
    spectrum: Spectrum
    scd: ScdMatrix
    profile: CyclicProfile
    features: FeatureVector


def analyze_clip(clip: AudioClip, grid: ScdGrid | None = None) -> tuple[FeatureVector, list[ChannelAnalysis]]:
    """
    Decimate to the analysis rate, then estimate SCD, profiles and features
    per channel. Multi-channel clips get the channel-averaged feature vector.
    """
    grid = grid or ScdGrid()
    low = decimate(clip, grid.analysis_rate_hz)
    channels = []
    for ch in range(low.channels):
        sp = dft_spectrum(low.channel(ch), low.sample_rate_hz)
        scd = estimate_scd_from_spectrum(sp, grid, clip.label)
        prof = cyclic_profiles(scd, sp)
        channels.append(ChannelAnalysis(sp, scd, prof, extract_features(prof)))
    return average_features([c.features for c in channels], clip.label), channels


def write_features_csv(vectors: Iterable[FeatureVector], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("clip",) + FEATURE_NAMES)
        for v in vectors:
            w.writerow([v.clip_label] + [f"{x:.12g}" for x in v.as_array()])


def read_features_csv(path) -> dict[str, FeatureVector]:
    out: dict[str, FeatureVector] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["clip", *FEATURE_NAMES]:
            raise MalformedInputError(f"expected header clip,{','.join(FEATURE_NAMES)}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out[row[0]] = FeatureVector.from_values([float(v) for v in row[1:]], row[0])
            except (ValueError, InvalidParameterError):
                raise MalformedInputError("malformed feature row", path, lineno) from None
    return out

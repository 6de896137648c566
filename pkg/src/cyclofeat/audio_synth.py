"""
Procedural synthesis of cyclic impulse patterns.

Four stimulus families are produced: a white-noise control, stochastic
repetition (SR) bundles, frequency-modulated (FM) impulse density ramps and
onset-list driven (MIR-style) tap patterns. Mono clips can be spatialised with
a constant-power pan law driven by a piecewise-linear azimuth trajectory.

All generators are pure functions of their spec and seed; numpy's PCG64
generator is used so output is reproducible across platforms.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidParameterError, MalformedInputError

DEFAULT_SAMPLE_RATE = 44100

#: inclusive carrier range for MIR damped-sinusoid taps
MIR_CARRIER_HZ = (1000.0, 4000.0)
#: decay time constant of a MIR tap, as a fraction of the impulse duration
MIR_DECAY_FRACTION = 0.2
#: cap on bundle restarts before an SR bundle falls back to minimal spacing
SR_MAX_REDRAWS = 1000


class PatternKind(str, Enum):
    WHITE_NOISE = "white_noise"
    SR = "sr"
    FM = "fm"
    MIR = "mir"


@dataclass(frozen=True)
class AudioClip:
    """
    Sampled audio with one or two channels.

    Parameters
    ----------
    samples : ndarray, shape (channels, n)
        Real amplitudes in [-1, 1]. A 1-D array is promoted to one channel.
    sample_rate_hz : int
        Sampling rate.
    label : str
        Free-form identifier.
    onsets_s : tuple of float
        Ground-truth impulse onsets in seconds, when the clip was synthesised.
    """

    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    label: str = ""
    onsets_s: tuple = ()

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[np.newaxis, :]
        if x.ndim != 2 or x.shape[0] not in (1, 2):
            raise InvalidParameterError(f"expected 1 or 2 channels, got shape {x.shape}")
        if int(self.sample_rate_hz) <= 0 or int(self.sample_rate_hz) != self.sample_rate_hz:
            raise InvalidParameterError(f"sample rate must be a positive integer, got {self.sample_rate_hz}")
        if x.size and (not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1.0):
            raise InvalidParameterError("samples must be finite and lie in [-1, 1]")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))
        object.__setattr__(self, "onsets_s", tuple(float(t) for t in self.onsets_s))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    def channel(self, index: int) -> np.ndarray:
        return self.samples[index]


@dataclass(frozen=True)
class PatternSpec:
    """Parameters of one synthesised stimulus."""

    kind: PatternKind = PatternKind.SR
    duration_s: float = 20.0
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    period_s: float = 1.6
    impulse_ms: float = 40.0
    fm_rate_max_hz: float = 25.0
    sr_count_range: tuple = (1, 20)
    seed: int = 0
    amplitude: float = 0.9
    sr_redraw_per_period: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", PatternKind(self.kind))
        object.__setattr__(self, "sr_count_range", tuple(int(k) for k in self.sr_count_range))

    def validate(self) -> None:
        if not self.duration_s > 0:
            raise InvalidParameterError(f"duration_s must be positive, got {self.duration_s}")
        if int(self.sample_rate_hz) <= 0:
            raise InvalidParameterError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not 0 < self.amplitude <= 1:
            raise InvalidParameterError(f"amplitude must lie in (0, 1], got {self.amplitude}")
        if not self.period_s > 0:
            raise InvalidParameterError(f"period_s must be positive, got {self.period_s}")
        if not self.impulse_ms > 0:
            raise InvalidParameterError(f"impulse_ms must be positive, got {self.impulse_ms}")
        lo, hi = self.sr_count_range
        if lo < 1 or hi < lo:
            raise InvalidParameterError(f"sr_count_range must satisfy 1 <= lo <= hi, got {self.sr_count_range}")
        if self.kind is PatternKind.SR:
            # the densest bundle must fit with minimum spacing, in seconds and in samples
            if hi * self.impulse_ms > 1000.0 * self.period_s + 1e-9 or \
                    hi * self.impulse_samples > self.period_samples:
                raise InvalidParameterError(
                    f"{hi} impulses of {self.impulse_ms} ms do not fit in a {self.period_s} s period")
        if self.kind is PatternKind.FM and not self.fm_rate_max_hz > 0:
            raise InvalidParameterError(f"fm_rate_max_hz must be positive, got {self.fm_rate_max_hz}")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate_hz))

    @property
    def impulse_samples(self) -> int:
        return max(2, int(round(self.impulse_ms * self.sample_rate_hz / 1000.0)))

    @property
    def period_samples(self) -> int:
        return int(round(self.period_s * self.sample_rate_hz))

    @property
    def n_periods(self) -> int:
        """Number of complete periods; a trailing partial period stays silent."""
        return self.n_samples // self.period_samples

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["sr_count_range"] = list(self.sr_count_range)
        return d


@dataclass(frozen=True)
class PanTrajectory:
    """Piecewise-linear azimuth path; -1 is full left, +1 full right."""

    breakpoints: tuple

    def __post_init__(self):
        pts = tuple((float(t), float(a)) for t, a in self.breakpoints)
        if not pts:
            raise InvalidParameterError("a trajectory needs at least one breakpoint")
        times = [t for t, _ in pts]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidParameterError("trajectory times must be strictly increasing")
        if any(not -1.0 <= a <= 1.0 for _, a in pts):
            raise InvalidParameterError("azimuths must lie in [-1, 1]")
        object.__setattr__(self, "breakpoints", pts)

    @classmethod
    def constant(cls, azimuth: float) -> "PanTrajectory":
        return cls(((0.0, azimuth),))

    @classmethod
    def oscillating(cls, duration_s: float, period_s: float = 3.2, depth: float = 1.0,
                    step_s: float = 0.05) -> "PanTrajectory":
        """Sinusoidal left-right sweep sampled every ``step_s`` seconds."""
        n = int(math.ceil(duration_s / step_s)) + 1
        t = np.arange(n) * step_s
        az = np.clip(depth * np.sin(2 * np.pi * t / period_s), -1.0, 1.0)
        return cls(tuple(zip(t.tolist(), az.tolist())))

    @classmethod
    def from_csv(cls, path) -> "PanTrajectory":
        """Read ``time_s,azimuth`` rows; a non-numeric first row is a header."""
        pts = []
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    t, a = float(row[0]), float(row[1])
                except (ValueError, IndexError):
                    if lineno == 1:
                        continue
                    raise MalformedInputError("expected 'time_s,azimuth'", path, lineno) from None
                if pts and t <= pts[-1][0]:
                    raise MalformedInputError("times must be strictly increasing", path, lineno)
                if not -1.0 <= a <= 1.0:
                    raise MalformedInputError(f"azimuth {a} outside [-1, 1]", path, lineno)
                pts.append((t, a))
        if not pts:
            raise MalformedInputError("trajectory file has no breakpoints", path)
        return cls(tuple(pts))

    def azimuth(self, t: np.ndarray) -> np.ndarray:
        times = np.array([p[0] for p in self.breakpoints])
        az = np.array([p[1] for p in self.breakpoints])
        # np.interp holds the end values outside the span
        return np.interp(t, times, az)


def _check_rate(duration_s, sample_rate_hz):
    if not duration_s > 0:
        raise InvalidParameterError(f"duration_s must be positive, got {duration_s}")
    if not sample_rate_hz > 0 or int(sample_rate_hz) != sample_rate_hz:
        raise InvalidParameterError(f"sample_rate_hz must be a positive integer, got {sample_rate_hz}")


def synth_white_noise(duration_s: float = 20.0, sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
                      seed: int = 0, amplitude: float = 0.9, label: str = "white_noise") -> AudioClip:
    """Gaussian noise with RMS ``amplitude / 3``, hard-clipped to [-1, 1]."""
    _check_rate(duration_s, sample_rate_hz)
    if not 0 < amplitude <= 1:
        raise InvalidParameterError(f"amplitude must lie in (0, 1], got {amplitude}")
    n = int(round(duration_s * sample_rate_hz))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n) * (amplitude / 3.0)
    return AudioClip(np.clip(x, -1.0, 1.0), sample_rate_hz, label)


def _noise_burst(rng: np.random.Generator, length: int, peak: float) -> np.ndarray:
    burst = rng.standard_normal(length) * np.hanning(length)
    m = np.max(np.abs(burst))
    return burst * (peak / m) if m > 0 else burst


def _render(onsets: Sequence[int], bursts: Sequence[np.ndarray], n: int) -> np.ndarray:
    out = np.zeros(n)
    for start, burst in zip(onsets, bursts):
        stop = min(n, start + len(burst))
        out[start:stop] += burst[: stop - start]
    return np.clip(out, -1.0, 1.0)


def _tile(period_wave: np.ndarray, offsets: Sequence[int], spec: PatternSpec):
    """Repeat one period over every complete period; the remainder stays silent."""
    n, P, reps = spec.n_samples, spec.period_samples, spec.n_periods
    x = np.zeros(n)
    x[: reps * P] = np.tile(period_wave, reps)
    onsets = [p * P + o for p in range(reps) for o in offsets]
    return x, onsets


def _sr_bundle(rng: np.random.Generator, k: int, length: int, period: int) -> list[int]:
    # Sequential uniform placement: a candidate closer than one impulse to an
    # accepted onset is rejected. A jammed bundle restarts; after
    # SR_MAX_REDRAWS restarts the minimally spaced bundle is used.
    last = period - length  # keeps the gap to the next period's first onset >= length
    for _ in range(SR_MAX_REDRAWS):
        accepted: list[int] = []
        misses = 0
        while len(accepted) < k and misses < 100 * k:
            cand = int(rng.integers(0, last + 1))
            if all(abs(cand - o) >= length for o in accepted):
                accepted.append(cand)
            else:
                misses += 1
        if len(accepted) == k:
            return sorted(accepted)
    return [i * length for i in range(k)]


def _draw_sr_bundle(rng: np.random.Generator, spec: PatternSpec) -> list[int]:
    lo, hi = spec.sr_count_range
    k = int(rng.integers(lo, hi + 1))
    return _sr_bundle(rng, k, spec.impulse_samples, spec.period_samples)


def synth_sr(spec: PatternSpec, label: str = "sr") -> AudioClip:
    """
    Stochastic-repetition pattern.

    A bundle of ``k ~ U{lo..hi}`` Hann-windowed noise bursts is placed by
    sequential rejection sampling and the same bundle waveform is repeated in
    every complete period. With ``spec.sr_redraw_per_period`` each period
    draws its own bundle instead. Inter-onset gaps, including those across
    period boundaries, are never shorter than one impulse.
    """
    if spec.kind is not PatternKind.SR:
        raise InvalidParameterError(f"synth_sr needs an SR spec, got {spec.kind.value}")
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    length, period = spec.impulse_samples, spec.period_samples
    if spec.sr_redraw_per_period:
        onsets = []
        for p in range(spec.n_periods):
            onsets.extend(p * period + off for off in _draw_sr_bundle(rng, spec))
        bursts = [_noise_burst(rng, length, spec.amplitude) for _ in onsets]
        x = _render(onsets, bursts, spec.n_samples)
    else:
        offsets = _draw_sr_bundle(rng, spec)
        bursts = [_noise_burst(rng, length, spec.amplitude) for _ in offsets]
        x, onsets = _tile(_render(offsets, bursts, period), offsets, spec)
    return AudioClip(x, spec.sample_rate_hz, label, [o / spec.sample_rate_hz for o in onsets])


def fm_onset_offsets(spec: PatternSpec) -> list[int]:
    """
    Onset offsets (samples) inside one period of the FM ramp.

    The impulse rate rises linearly from 0 to ``fm_rate_max_hz`` over a period;
    onsets sit where the accumulated phase crosses an integer. When a period
    does not hold a whole number of cycles the crossings drift between
    periods, so this helper only describes the integer case.
    """
    per_period = spec.fm_rate_max_hz * spec.period_s / 2.0
    count = int(math.ceil(per_period - 1e-9))
    return [int(round(math.sqrt(2.0 * spec.period_s * j / spec.fm_rate_max_hz) * spec.sample_rate_hz))
            for j in range(count)]


def fm_onsets(spec: PatternSpec) -> list[int]:
    """All onset samples of an FM clip, over complete periods only."""
    per_period = spec.fm_rate_max_hz * spec.period_s / 2.0
    onsets = []
    n = 0
    while True:
        p = int(math.floor(n / per_period + 1e-12))
        if p >= spec.n_periods:
            return onsets
        tau = math.sqrt(max(0.0, 2.0 * spec.period_s * (n - p * per_period) / spec.fm_rate_max_hz))
        onsets.append(p * spec.period_samples + int(round(tau * spec.sample_rate_hz)))
        n += 1


def synth_fm(spec: PatternSpec, label: str = "fm") -> AudioClip:
    """
    Linear impulse-density ramp from 0 to ``fm_rate_max_hz`` every period.

    Onsets are fully deterministic. When a period holds a whole number of
    impulses the period waveform is repeated verbatim.
    """
    if spec.kind is not PatternKind.FM:
        raise InvalidParameterError(f"synth_fm needs an FM spec, got {spec.kind.value}")
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    length = spec.impulse_samples
    per_period = spec.fm_rate_max_hz * spec.period_s / 2.0
    if abs(per_period - round(per_period)) < 1e-9:
        offsets = fm_onset_offsets(spec)
        templates = [_noise_burst(rng, length, spec.amplitude) for _ in offsets]
        onsets = [p * spec.period_samples + o for p in range(spec.n_periods) for o in offsets]
        bursts = templates * spec.n_periods
    else:
        onsets = fm_onsets(spec)
        bursts = [_noise_burst(rng, length, spec.amplitude) for _ in onsets]
    x = _render(onsets, bursts, spec.n_samples)
    return AudioClip(x, spec.sample_rate_hz, label, [o / spec.sample_rate_hz for o in onsets])


def read_onset_file(path, duration_s: float | None = None) -> list[tuple[float, float | None]]:
    """
    Parse a ``time_s[,amplitude]`` onset list.

    Blank lines and ``#`` comments are skipped. Onsets must be non-decreasing
    and, when ``duration_s`` is given, inside ``[0, duration_s)``.
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) > 2:
                raise MalformedInputError("expected 'time_s[,amplitude]'", path, lineno)
            try:
                t = float(parts[0])
                amp = float(parts[1]) if len(parts) == 2 and parts[1] else None
            except ValueError:
                raise MalformedInputError(f"not a number: {line!r}", path, lineno) from None
            if not math.isfinite(t) or t < 0 or (duration_s is not None and t >= duration_s):
                raise MalformedInputError(f"onset {t} s outside [0, {duration_s})", path, lineno)
            if rows and t < rows[-1][0]:
                raise MalformedInputError("onsets must be sorted ascending", path, lineno)
            if amp is not None and not 0 < amp <= 1:
                raise MalformedInputError(f"amplitude {amp} outside (0, 1]", path, lineno)
            rows.append((t, amp))
    return rows


def _damped_tap(length: int, sample_rate_hz: int, carrier_hz: float, peak: float) -> np.ndarray:
    t = np.arange(length) / sample_rate_hz
    tau = MIR_DECAY_FRACTION * length / sample_rate_hz
    w = np.exp(-t / tau) * np.sin(2 * np.pi * carrier_hz * t)
    return w * (peak / np.max(np.abs(w)))


def mir_carrier_hz(seed: int) -> float:
    """Tap resonance shared by every onset of a MIR clip."""
    return float(np.random.default_rng(seed).uniform(*MIR_CARRIER_HZ))


def synth_mir(onset_file, spec: PatternSpec, label: str = "mir") -> AudioClip:
    """One exponentially decaying sinusoid per onset listed in ``onset_file``."""
    if spec.kind is not PatternKind.MIR:
        raise InvalidParameterError(f"synth_mir needs a MIR spec, got {spec.kind.value}")
    spec.validate()
    rows = read_onset_file(onset_file, spec.duration_s)
    return synth_mir_onsets(rows, spec, label)


def synth_mir_onsets(rows: Sequence[tuple[float, float | None]], spec: PatternSpec,
                     label: str = "mir") -> AudioClip:
    spec.validate()
    n = spec.n_samples
    carrier = mir_carrier_hz(spec.seed)
    tap = _damped_tap(spec.impulse_samples, spec.sample_rate_hz, carrier, 1.0)
    onsets, taps = [], []
    for t, amp in rows:
        start = int(round(t * spec.sample_rate_hz))
        if start >= n:
            continue
        onsets.append(start)
        taps.append(tap * (spec.amplitude if amp is None else amp))
    x = _render(onsets, taps, n)
    return AudioClip(x, spec.sample_rate_hz, label, [o / spec.sample_rate_hz for o in onsets])


def periodic_onsets(pattern_s: Sequence[float], period_s: float, duration_s: float) -> list[float]:
    """Tile a within-period onset pattern over every complete period."""
    n_periods = int(math.floor(duration_s / period_s + 1e-9))
    return [p * period_s + t for p in range(n_periods) for t in pattern_s]


def synthesize(spec: PatternSpec, onset_file=None, label: str | None = None) -> AudioClip:
    """Dispatch on ``spec.kind``."""
    label = label or spec.kind.value
    if spec.kind is PatternKind.WHITE_NOISE:
        return synth_white_noise(spec.duration_s, spec.sample_rate_hz, spec.seed, spec.amplitude, label)
    if spec.kind is PatternKind.SR:
        return synth_sr(spec, label)
    if spec.kind is PatternKind.FM:
        return synth_fm(spec, label)
    if onset_file is None:
        raise InvalidParameterError("MIR synthesis needs an onset file")
    return synth_mir(onset_file, spec, label)


def spatialize(clip: AudioClip, trajectory: PanTrajectory, label: str | None = None) -> AudioClip:
    """
    Constant-power stereo pan of a mono clip.

    Left gain is cos(theta) and right gain sin(theta) with
    theta = (azimuth + 1) * pi / 4, so L**2 + R**2 equals the mono signal squared.
    """
    if clip.channels != 1:
        raise InvalidParameterError("spatialize needs a mono clip")
    t = np.arange(clip.n_samples) / clip.sample_rate_hz
    theta = (trajectory.azimuth(t) + 1.0) * (np.pi / 4.0)
    x = clip.samples[0]
    # both gains lie in [0, 1], so the result stays inside [-1, 1]
    stereo = np.vstack([x * np.cos(theta), x * np.sin(theta)])
    return AudioClip(stereo, clip.sample_rate_hz, label or clip.label, clip.onsets_s)


def detect_onsets(x: np.ndarray, threshold: float = 0.0, min_silence: int = 1) -> np.ndarray:
    """
    Indices where the signal leaves silence.

    A sample counts as an onset when ``|x| > threshold`` and the preceding
    ``min_silence`` samples (or the clip start) are all at or below it. The
    synthesised bursts begin with an exact zero, so each detection lands one
    sample after the true onset.
    """
    active = np.abs(np.asarray(x, dtype=float)) > threshold
    if active.size == 0:
        return np.array([], dtype=int)
    idx = np.flatnonzero(active)
    quiet_count = np.concatenate([[0], np.cumsum(~active)])
    lo = np.maximum(idx - min_silence, 0)
    # windows clipped at the clip start count as silent lead-in
    all_quiet = (quiet_count[idx] - quiet_count[lo]) == idx - lo
    return idx[all_quiet]


def write_sidecar(clip: AudioClip, spec: PatternSpec | None, path, **extra) -> None:
    """JSON metadata with spec, seed and the ground-truth onset list."""
    doc = {
        "label": clip.label,
        "sample_rate_hz": clip.sample_rate_hz,
        "channels": clip.channels,
        "n_samples": clip.n_samples,
        "spec": spec.to_dict() if spec is not None else None,
        "seed": spec.seed if spec is not None else None,
        "onsets_s": [round(t, 9) for t in clip.onsets_s],
    }
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_sidecar(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))

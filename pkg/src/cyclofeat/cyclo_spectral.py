"""
Second-order cyclic spectral analysis.

The spectral correlation density is estimated with a frequency-smoothed
cyclic periodogram over a single full-length DFT::

    D[m, a] = (1/M) * sum_{v=-(M-1)/2}^{(M-1)/2} S[m + a + v] * conj(S[m + v])

reported at cyclic frequency ``a * df`` and centre frequency ``(m + a/2) * df``.
Bins outside the one-sided spectrum contribute zero. The moving sum uses
per-block prefix and suffix sums, so every window is assembled only from the
terms it contains (no long-range cancellation) while the cost stays O(A*N).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as ss

from .audio_synth import AudioClip
from .errors import InsufficientDataError, InvalidParameterError

DECIMATION_TAPS = 255
DECIMATION_CUTOFF = 0.45      # fraction of the target rate
DECIMATION_STOPBAND_DB = 60.0
COHERENCE_EPS = 1e-15         # relative to the largest smoothed PSD value
HEATMAP_FLOOR_DB = 200.0
ALPHA_CHUNK = 32


@dataclass(frozen=True)
class Spectrum:
    """One-sided DFT with 1/N scaling."""

    bins: np.ndarray
    sample_rate_hz: float
    n_samples: int

    @property
    def delta_f_hz(self) -> float:
        return self.sample_rate_hz / self.n_samples

    @property
    def freqs_hz(self) -> np.ndarray:
        return np.arange(len(self.bins)) * self.delta_f_hz

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)

    def onesided_weights(self) -> np.ndarray:
        """Parseval weights: 1 for DC (and Nyquist when N is even), 2 elsewhere."""
        w = np.full(len(self.bins), 2.0)
        w[0] = 1.0
        if self.n_samples % 2 == 0:
            w[-1] = 1.0
        return w


@dataclass(frozen=True)
class ScdGrid:
    """
    Estimation grid.

    ``analysis_rate_hz`` is the rate clips are decimated to before estimation;
    4410 Hz is the closest integer-factor rate to 4 kHz for 44.1 kHz audio.
    """

    alpha_max_hz: float = 50.0
    f_stride: int = 100
    smoothing_bins: int = 401
    analysis_rate_hz: int = 4410

    def __post_init__(self):
        if self.smoothing_bins < 1 or self.smoothing_bins % 2 == 0:
            raise InvalidParameterError(f"smoothing_bins must be odd and positive, got {self.smoothing_bins}")
        if self.f_stride < 1:
            raise InvalidParameterError(f"f_stride must be >= 1, got {self.f_stride}")
        if not 0 <= self.alpha_max_hz < self.analysis_rate_hz / 2:
            raise InvalidParameterError(
                f"alpha_max_hz must lie in [0, {self.analysis_rate_hz / 2}), got {self.alpha_max_hz}")

    def n_alpha(self, delta_f_hz: float) -> int:
        """Highest cyclic-frequency index A (grid is a = 0..A)."""
        return int(np.floor(self.alpha_max_hz / delta_f_hz + 1e-9))


@dataclass(frozen=True)
class ScdMatrix:
    """
    Spectral correlation values on the (alpha, f) grid.

    ``values[a, j]`` belongs to cyclic index ``a`` and stored bin
    ``m_index[j]``; ``psd_smoothed`` is the full-resolution alpha = 0 row that
    coherence normalisation needs.
    """

    values: np.ndarray
    alpha_hz: np.ndarray
    m_index: np.ndarray
    delta_f_hz: float
    psd_smoothed: np.ndarray
    grid: ScdGrid
    source_label: str = ""

    @property
    def f_center_hz(self) -> np.ndarray:
        a = np.arange(len(self.alpha_hz))[:, None]
        return (self.m_index[None, :] + a / 2.0) * self.delta_f_hz


@dataclass(frozen=True)
class CoherenceMatrix:
    values: np.ndarray
    alpha_hz: np.ndarray
    m_index: np.ndarray
    delta_f_hz: float
    source_label: str = ""


@dataclass(frozen=True)
class CyclicProfile:
    """
    Univariate reductions of the SCD over frequency.

    ``d_mean`` is the magnitude of the complex mean over stored bins and
    ``d_max`` the maximum magnitude. ``cyclic`` marks entries with alpha > 0;
    the alpha = 0 entry is kept but excluded from feature extraction.
    """

    alpha_hz: np.ndarray
    d_mean: np.ndarray
    d_max: np.ndarray
    spectrum_mag: np.ndarray
    spectrum_delta_f_hz: float = 0.0
    label: str = ""
    cyclic: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.cyclic is None:
            object.__setattr__(self, "cyclic", np.asarray(self.alpha_hz) > 0)


def dft_spectrum(x, sample_rate_hz: float = 1.0) -> Spectrum:
    """One-sided DFT of a real channel, scaled by 1/N."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidParameterError("dft_spectrum needs a non-empty 1-D channel")
    return Spectrum(np.fft.rfft(x) / x.size, float(sample_rate_hz), x.size)


def decimation_filter(source_rate_hz: int, target_rate_hz: int) -> np.ndarray:
    beta = ss.kaiser_beta(DECIMATION_STOPBAND_DB)
    return ss.firwin(DECIMATION_TAPS, DECIMATION_CUTOFF * target_rate_hz,
                     window=("kaiser", beta), fs=source_rate_hz)


def decimate(clip: AudioClip, target_rate_hz: int) -> AudioClip:
    """Kaiser windowed-sinc low-pass followed by integer downsampling."""
    if target_rate_hz <= 0 or clip.sample_rate_hz % target_rate_hz:
        raise InvalidParameterError(
            f"cannot decimate {clip.sample_rate_hz} Hz to {target_rate_hz} Hz by an integer factor")
    q = clip.sample_rate_hz // target_rate_hz
    if q == 1:
        return clip
    h = decimation_filter(clip.sample_rate_hz, target_rate_hz)
    # odd-length linear-phase filter: 'same' removes the group delay exactly
    out = np.vstack([np.convolve(ch, h, mode="same")[::q] for ch in clip.samples])
    return AudioClip(np.clip(out, -1.0, 1.0), target_rate_hz, clip.label, clip.onsets_s)


def _window_sums(x: np.ndarray, M: int, at: np.ndarray) -> np.ndarray:
    """
    Centred length-``M`` window sums of ``x`` (zero outside) at indices ``at``.

    ``x`` may carry leading batch axes. Windows are split at block boundaries
    of length ``M``: each is a suffix of one block plus a prefix of the next.
    """
    K = x.shape[-1]
    h = M // 2
    n_blocks = (K + 2 * h) // M + 2
    padded = np.zeros(x.shape[:-1] + (n_blocks * M,), dtype=x.dtype)
    padded[..., h:h + K] = x
    blocks = padded.reshape(x.shape[:-1] + (n_blocks, M))
    prefix = np.cumsum(blocks, axis=-1).reshape(padded.shape)
    suffix = np.cumsum(blocks[..., ::-1], axis=-1)[..., ::-1].reshape(padded.shape)
    # window for centre m spans padded[m : m + M]
    out = suffix[..., at]
    tail = at % M != 0
    out[..., tail] += prefix[..., at[tail] + M - 1]
    return out


def smoothed_psd(spectrum: Spectrum, M: int) -> np.ndarray:
    p = spectrum.bins.real ** 2 + spectrum.bins.imag ** 2
    return _window_sums(p, M, np.arange(p.size)) / M


def estimate_scd_from_spectrum(spectrum: Spectrum, grid: ScdGrid, label: str = "") -> ScdMatrix:
    M = grid.smoothing_bins
    if spectrum.n_samples < 2 * M:
        raise InsufficientDataError(
            f"need at least {2 * M} samples for {M}-bin smoothing, got {spectrum.n_samples}")
    if grid.alpha_max_hz >= spectrum.sample_rate_hz / 2:
        raise InvalidParameterError("alpha_max_hz must stay below half the sample rate")
    S = spectrum.bins
    K = S.size
    A = grid.n_alpha(spectrum.delta_f_hz)
    at = np.arange(0, K, grid.f_stride)
    S_pad = np.concatenate([S, np.zeros(A + 1, dtype=S.dtype)])
    S_conj = np.conj(S)
    k = np.arange(K)
    values = np.empty((A + 1, at.size), dtype=np.complex128)
    for start in range(0, A + 1, ALPHA_CHUNK):
        a = np.arange(start, min(A + 1, start + ALPHA_CHUNK))
        prod = S_pad[a[:, None] + k[None, :]] * S_conj[None, :]
        values[a] = _window_sums(prod, M, at) / M
    psd = smoothed_psd(spectrum, M)
    # the a = 0 row is a smoothed periodogram; keep it exactly real
    values[0] = psd[at]
    alpha = np.arange(A + 1) * spectrum.delta_f_hz
    return ScdMatrix(values, alpha, at, spectrum.delta_f_hz, psd, grid, label)


def estimate_scd(channel, sample_rate_hz: float, grid: ScdGrid | None = None, label: str = "") -> ScdMatrix:
    """Frequency-smoothed cyclic periodogram of one real channel."""
    grid = grid or ScdGrid()
    x = np.asarray(channel, dtype=np.float64)
    if x.size < 2 * grid.smoothing_bins:
        raise InsufficientDataError(
            f"need at least {2 * grid.smoothing_bins} samples, got {x.size}")
    return estimate_scd_from_spectrum(dft_spectrum(x, sample_rate_hz), grid, label)


def cyclic_coherence(scd: ScdMatrix) -> CoherenceMatrix:
    """Normalise by the geometric mean of the identically smoothed PSD at both bins."""
    psd = np.asarray(scd.psd_smoothed)
    A1, F = scd.values.shape
    if scd.m_index.size != F or scd.alpha_hz.size != A1 or (F and scd.m_index[-1] >= psd.size):
        raise InvalidParameterError("SCD matrix and its smoothed PSD do not share a grid")
    eps = COHERENCE_EPS * (psd.max() if psd.size else 0.0)
    upper = scd.m_index[None, :] + np.arange(A1)[:, None]
    inside = upper < psd.size
    p_hi = np.where(inside, psd[np.minimum(upper, psd.size - 1)], 0.0)
    p_lo = np.broadcast_to(psd[scd.m_index][None, :], p_hi.shape)
    ok = inside & (p_hi >= eps) & (p_lo >= eps) & (p_hi > 0) & (p_lo > 0)
    denom = np.sqrt(np.where(ok, p_hi * p_lo, 1.0))
    C = np.where(ok, scd.values / denom, 0.0)
    return CoherenceMatrix(C, scd.alpha_hz, scd.m_index, scd.delta_f_hz, scd.source_label)


def cyclic_profiles(scd: ScdMatrix, spectrum: Spectrum) -> CyclicProfile:
    mag = np.abs(scd.values)
    return CyclicProfile(
        alpha_hz=scd.alpha_hz.copy(),
        d_mean=np.abs(scd.values.mean(axis=1)),
        d_max=mag.max(axis=1),
        spectrum_mag=spectrum.magnitude,
        spectrum_delta_f_hz=spectrum.delta_f_hz,
        label=scd.source_label,
    )


def heatmap_pixels(matrix) -> np.ndarray:
    """
    Log-magnitude image scaled to 0..255.

    Magnitudes are converted to dB and floored 200 dB below the peak, so exact
    zeros map to the darkest level. A flat image maps to all zeros.
    """
    values = getattr(matrix, "values", matrix)
    mag = np.abs(np.asarray(values))
    if mag.ndim != 2 or mag.size == 0:
        raise InvalidParameterError("heatmap needs a non-empty 2-D matrix")
    peak = mag.max()
    if peak <= 0 or not np.isfinite(peak):
        return np.zeros(mag.shape, dtype=np.uint8)
    floor = 20 * np.log10(peak) - HEATMAP_FLOOR_DB
    with np.errstate(divide="ignore"):
        db = np.maximum(20 * np.log10(mag), floor)
    lo, hi = db.min(), db.max()
    if hi <= lo:
        return np.zeros(mag.shape, dtype=np.uint8)
    return np.round(255.0 * (db - lo) / (hi - lo)).astype(np.uint8)


def render_heatmap(matrix, path) -> None:
    """Write an 8-bit binary PGM; rows are alpha ascending, columns f ascending."""
    px = heatmap_pixels(matrix)
    rows, cols = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def write_profile_csv(profile: CyclicProfile, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha_hz", "d_mean", "d_max"])
        for a, m, x in zip(profile.alpha_hz, profile.d_mean, profile.d_max):
            w.writerow([f"{a:.12g}", f"{m:.12g}", f"{x:.12g}"])


def write_spectrum_csv(spectrum: Spectrum, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["f_hz", "magnitude"])
        for f, m in zip(spectrum.freqs_hz, spectrum.magnitude):
            w.writerow([f"{f:.12g}", f"{m:.12g}"])

"""Waveform feature extraction and inversion at a fixed 8 kHz desk scale.

The short-time transform is expressed as matrix products with fixed cosine
and sine matrices so the whole analysis chain stays differentiable through
the tensor engine.  The inverse transform uses ratio-normalized weighted
overlap-add, which reconstructs windowed frames exactly and gives
Griffin-Lim phase retrieval something solid to iterate on.

dB quantities are referenced so that a full-scale sine hitting a bin center
reads 96 dB, the usual convention when anchoring the absolute threshold of
hearing to digital audio.
"""

from __future__ import annotations

import wave as wavelib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import (
    Tensor,
    clamp,
    crop,
    div,
    frame,
    log,
    matmul,
    mul,
    overlap_add,
    pad,
    sqrt,
    exp,
)


class InputTooShortError(ValueError):
    """Waveform shorter than one analysis window."""


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 8000
    window_length: int = 200  # 25 ms
    frame_shift: int = 80     # 10 ms
    fft_size: int = 256
    n_mels: int = 40
    log_floor: float = 1e-10


DEFAULT_FRONTEND = FrontendConfig()

# Full-scale sine at a bin center reads 96 dB under this power reference.
DB_CEILING = 96.0
# Triangular spreading slopes in dB per bark, below and above the masker.
SPREAD_LOWER_DB_PER_BARK = 27.0
SPREAD_UPPER_DB_PER_BARK = 12.0
# Fixed drop of a tonal masker's threshold contribution below its own level.
MASKING_OFFSET_DB = 10.0
_POWER_FLOOR = 1e-12


@dataclass
class Waveform:
    """Mono audio in [-1, 1] at a known sample rate."""

    samples: np.ndarray
    sample_rate: int = 8000

    def __post_init__(self):
        arr = np.ascontiguousarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"waveform must be 1D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("waveform contains non-finite samples")
        peak = np.abs(arr).max() if arr.size else 0.0
        if peak > 1.0 + 1e-12:
            raise ValueError(f"waveform exceeds [-1, 1], peak {peak:.6f}")
        object.__setattr__(self, "samples", arr)

    def __len__(self):
        return self.samples.shape[0]


@dataclass
class MaskingThreshold:
    """Per-frame, per-bin masked energy ceiling in dB."""

    db: np.ndarray


def num_frames(n_samples, cfg=DEFAULT_FRONTEND):
    if n_samples < cfg.window_length:
        raise InputTooShortError(
            f"need at least {cfg.window_length} samples, got {n_samples}"
        )
    return 1 + (n_samples - cfg.window_length) // cfg.frame_shift


@lru_cache(maxsize=None)
def _window(cfg):
    return np.hanning(cfg.window_length)


@lru_cache(maxsize=None)
def _dft_matrices(cfg):
    """Forward cosine/sine matrices (window x bins) for a zero-padded DFT."""
    n = np.arange(cfg.window_length)[:, None]
    k = np.arange(cfg.fft_size // 2 + 1)[None, :]
    angle = 2.0 * np.pi * n * k / cfg.fft_size
    return np.cos(angle), -np.sin(angle)


@lru_cache(maxsize=None)
def _idft_matrices(cfg):
    """Inverse matrices (bins x window) rebuilding the first window_length samples."""
    bins = cfg.fft_size // 2 + 1
    k = np.arange(bins)[:, None]
    n = np.arange(cfg.window_length)[None, :]
    angle = 2.0 * np.pi * k * n / cfg.fft_size
    scale = np.full((bins, 1), 2.0)
    scale[0, 0] = 1.0
    if cfg.fft_size % 2 == 0:
        scale[-1, 0] = 1.0
    inv_cos = scale * np.cos(angle) / cfg.fft_size
    inv_sin = -scale * np.sin(angle) / cfg.fft_size
    return inv_cos, inv_sin


@lru_cache(maxsize=None)
def bin_frequencies(cfg=DEFAULT_FRONTEND):
    return np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(cfg=DEFAULT_FRONTEND):
    """Triangular filters with unit peaks, shape (bins, n_mels)."""
    bins = cfg.fft_size // 2 + 1
    edges = _mel_to_hz(
        np.linspace(_hz_to_mel(0.0), _hz_to_mel(cfg.sample_rate / 2.0), cfg.n_mels + 2)
    )
    freqs = bin_frequencies(cfg)
    fb = np.zeros((bins, cfg.n_mels))
    for m in range(cfg.n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / max(center - lo, 1e-9)
        falling = (hi - freqs) / max(hi - center, 1e-9)
        fb[:, m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


@lru_cache(maxsize=None)
def mel_pseudo_inverse(cfg=DEFAULT_FRONTEND):
    """Least-squares inverse of the filterbank, shape (bins, n_mels)."""
    return np.linalg.pinv(mel_filterbank(cfg).T)


@lru_cache(maxsize=None)
def _power_reference(cfg):
    # Peak bin power of a full-scale sine centered on a bin.
    return (_window(cfg).sum() / 2.0) ** 2


def _as_sample_tensor(x):
    if isinstance(x, Tensor):
        if x.data.ndim != 1:
            raise ValueError(f"expected 1D samples, got shape {x.shape}")
        return x
    if isinstance(x, Waveform):
        return Tensor(x.samples)
    return Tensor(np.asarray(x, dtype=np.float64))


def stft(x, cfg=DEFAULT_FRONTEND):
    """Real/imaginary spectrogram tensors, each (frames, bins)."""
    xt = _as_sample_tensor(x)
    if xt.shape[0] < cfg.window_length:
        raise InputTooShortError(
            f"need at least {cfg.window_length} samples, got {xt.shape[0]}"
        )
    cos_m, sin_m = _dft_matrices(cfg)
    framed = frame(xt, cfg.window_length, cfg.frame_shift)
    windowed = mul(framed, Tensor(_window(cfg)))
    return matmul(windowed, Tensor(cos_m)), matmul(windowed, Tensor(sin_m))


def istft(real, imag, cfg=DEFAULT_FRONTEND):
    """Ratio-normalized weighted overlap-add inverse of stft.

    The overlap-added window energy is divided out rather than assumed
    constant, so any (real, imag) actually produced by stft reconstructs
    exactly wherever meaningful analysis weight exists.  The outermost few
    samples, whose total window energy falls below 1e-4 of the plateau,
    are emitted as zero: dividing by a near-zero weight there would only
    amplify noise-floor energy by orders of magnitude.
    """
    inv_cos, inv_sin = _idft_matrices(cfg)
    segments = _tensor_add(matmul(real, Tensor(inv_cos)), matmul(imag, Tensor(inv_sin)))
    win = _window(cfg)
    weighted = mul(segments, Tensor(win))
    signal = overlap_add(weighted, cfg.frame_shift)
    count = real.shape[0]
    length = (count - 1) * cfg.frame_shift + cfg.window_length
    wsum = np.zeros(length)
    span = (count - 1) * cfg.frame_shift + 1
    for j in range(cfg.window_length):
        wsum[j:j + span:cfg.frame_shift] += win[j] ** 2
    usable = wsum >= 1e-4 * wsum.max()
    gain = np.where(usable, 1.0 / np.maximum(wsum, 1e-12), 0.0)
    return mul(signal, Tensor(gain))


def _tensor_add(a, b):
    from .tensor import add as tensor_add

    return tensor_add(a, b)


def power_spectrogram(x, cfg=DEFAULT_FRONTEND):
    real, imag = stft(x, cfg)
    return _tensor_add(mul(real, real), mul(imag, imag))


def logmel(x, cfg=DEFAULT_FRONTEND):
    """Log mel-power features, shape (frames, n_mels).

    Silence maps to log(log_floor) in every cell; shifting the input by
    exactly one frame_shift shifts the rows by one.
    """
    power = power_spectrogram(x, cfg)
    mel = matmul(power, Tensor(mel_filterbank(cfg)))
    return log(clamp(mel, cfg.log_floor, np.inf))


def mel_invert(melspec, cfg=DEFAULT_FRONTEND):
    """Least-squares power spectrogram matching a log-mel matrix.

    Returns the power-domain reconstruction (frames, bins) with negative
    least-squares artifacts clamped to zero.  Take a square root to get
    magnitudes for phase retrieval.
    """
    if not isinstance(melspec, Tensor):
        melspec = Tensor(np.asarray(melspec, dtype=np.float64))
    power = matmul(exp(melspec), Tensor(mel_pseudo_inverse(cfg).T))
    return clamp(power, 0.0, np.inf)


def griffin_lim(mag, iters, cfg=DEFAULT_FRONTEND, length=None):
    """Phase retrieval from a magnitude spectrogram, zero-phase start.

    Each iteration inverts the current spectrogram with overlap-add, takes
    the forward transform, and replaces its magnitude with the target.  The
    returned samples are clamped to [-1, 1] and, when length is given,
    trimmed or zero-padded to exactly that many samples.
    """
    if iters < 1:
        raise ValueError(f"griffin_lim needs at least one iteration, got {iters}")
    if not isinstance(mag, Tensor):
        mag = Tensor(np.asarray(mag, dtype=np.float64))
    if mag.data.ndim != 2:
        raise ValueError(f"magnitude must be 2D, got shape {mag.shape}")
    real = mag
    imag = mul(mag, 0.0)
    for _ in range(iters):
        y = istft(real, imag, cfg)
        est_real, est_imag = stft(y, cfg)
        est_mag = sqrt(
            _tensor_add(mul(est_real, est_real), mul(est_imag, est_imag))
        )
        real = div(mul(mag, est_real), est_mag)
        imag = div(mul(mag, est_imag), est_mag)
    y = clamp(istft(real, imag, cfg), -1.0, 1.0)
    if length is not None:
        n = y.shape[0]
        if n > length:
            y = crop(y, 0, length)
        elif n < length:
            y = pad(y, 0, length - n)
    return y


def spectral_convergence(reference_mag, samples, cfg=DEFAULT_FRONTEND):
    """Relative Frobenius mismatch between a target magnitude and a signal."""
    real, imag = stft(Tensor(np.asarray(samples, dtype=np.float64)), cfg)
    got = np.sqrt(real.data**2 + imag.data**2)
    ref = np.asarray(reference_mag, dtype=np.float64)
    return float(np.linalg.norm(got - ref) / max(np.linalg.norm(ref), 1e-12))


def power_to_db(power, cfg=DEFAULT_FRONTEND):
    """Map linear power to dB with the full-scale-sine-at-96 dB reference."""
    ref = _power_reference(cfg)
    return 10.0 * np.log10(np.maximum(np.asarray(power, dtype=np.float64), _POWER_FLOOR) / ref) + DB_CEILING


def power_db_tensor(power, cfg=DEFAULT_FRONTEND):
    """Differentiable version of power_to_db for tape-recorded spectra."""
    ref = _power_reference(cfg)
    scaled = mul(power, 1.0 / ref)
    floored = clamp(scaled, _POWER_FLOOR / ref, np.inf)
    return _tensor_add(mul(log(floored), 10.0 / np.log(10.0)), Tensor(np.asarray(DB_CEILING)))


def absolute_hearing_threshold(cfg=DEFAULT_FRONTEND):
    """Threshold-in-quiet per bin in dB, capped at the digital ceiling.

    Uses the standard quiet-threshold fit in kHz terms; the DC bin is
    evaluated at 20 Hz to keep the low-frequency pole finite.
    """
    f_khz = np.maximum(bin_frequencies(cfg), 20.0) / 1000.0
    ath = (
        3.64 * f_khz**-0.8
        - 6.5 * np.exp(-0.6 * (f_khz - 3.3) ** 2)
        + 1e-3 * f_khz**4
    )
    return np.minimum(ath, DB_CEILING)


def bark_scale(freq_hz):
    f = np.asarray(freq_hz, dtype=np.float64)
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


def masking_threshold(x, cfg=DEFAULT_FRONTEND):
    """Simplified per-frame psychoacoustic masking threshold in dB.

    Tonal maskers are the strict local maxima of each frame's power
    spectrum that clear the threshold in quiet.  Each masker contributes a
    triangle in bark space, dropping MASKING_OFFSET_DB below its own level
    at the peak with slopes of -27 dB/bark toward lower and -12 dB/bark
    toward higher frequencies.  Contributions combine with the quiet
    threshold by maximum, so digital silence yields exactly the quiet
    threshold and amplifying the input never lowers any cell.
    """
    if isinstance(x, Waveform):
        samples = x.samples
    elif isinstance(x, Tensor):
        samples = x.data
    else:
        samples = np.asarray(x, dtype=np.float64)
    power = power_spectrogram(Tensor(samples), cfg).data
    level_db = power_to_db(power, cfg)
    ath = absolute_hearing_threshold(cfg)
    barks = bark_scale(bin_frequencies(cfg))
    n_frames, n_bins = level_db.shape
    out = np.tile(ath, (n_frames, 1))
    interior = np.s_[1:n_bins - 1]
    for t in range(n_frames):
        row = level_db[t]
        is_peak = (row[interior] > row[:-2]) & (row[interior] > row[2:])
        peaks = np.flatnonzero(is_peak) + 1
        peaks = peaks[row[peaks] >= ath[peaks]]
        if peaks.size == 0:
            continue
        delta = barks[None, :] - barks[peaks][:, None]
        spread = np.where(
            delta < 0.0,
            SPREAD_LOWER_DB_PER_BARK * delta,
            -SPREAD_UPPER_DB_PER_BARK * delta,
        )
        contrib = row[peaks][:, None] - MASKING_OFFSET_DB + spread
        out[t] = np.maximum(out[t], contrib.max(axis=0))
    return MaskingThreshold(db=out)


def write_wav(path, wave):
    """Write mono 16-bit little-endian PCM, samples scaled by 32768."""
    ints = np.clip(np.rint(wave.samples * 32768.0), -32768, 32767).astype("<i2")
    with wavelib.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wave.sample_rate)
        fh.writeframes(ints.tobytes())


def read_wav(path):
    """Read a WAV produced by write_wav back into a Waveform."""
    with wavelib.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=rate)

"""Audio I/O, log-mel analysis, F0 conditioning tracks and pitch transposition.

All functions here are pure: identical inputs give bit-identical outputs, and
nothing holds mutable state, so they are safe to call concurrently.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

DEFAULT_SAMPLE_RATE = 32000


class AudioError(Exception):
    """Raised for unreadable or unsupported audio input."""


@dataclass(frozen=True)
class FeatureConfig:
    """Log-mel analysis settings.

    The defaults give 100 bands between 10 Hz and 15200 Hz from a 45 ms Hann
    window advanced by 5 ms, at a 32 kHz sample rate (which keeps the upper
    band edge below Nyquist with margin).
    """

    sample_rate: int = DEFAULT_SAMPLE_RATE
    hop_ms: float = 5.0
    win_ms: float = 45.0
    n_bands: int = 100
    fmin_hz: float = 10.0
    fmax_hz: float = 15200.0
    log_floor: float = 1e-5

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def win_samples(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000.0))

    @property
    def n_fft(self) -> int:
        n = 1
        while n < self.win_samples:
            n *= 2
        return n

    def n_frames(self, n_samples: int) -> int:
        return n_samples // self.hop_samples + 1

    def fingerprint(self) -> str:
        blob = json.dumps(
            {
                "sample_rate": self.sample_rate,
                "hop_ms": self.hop_ms,
                "win_ms": self.win_ms,
                "n_bands": self.n_bands,
                "fmin_hz": self.fmin_hz,
                "fmax_hz": self.fmax_hz,
                "log_floor": self.log_floor,
            },
            sort_keys=True,
        ).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class AudioClip:
    """Mono audio with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError(f"expected mono samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    """Frame-major matrix of log mel-band energies, shape [n_frames, n_bands]."""

    values: np.ndarray
    config: FeatureConfig = field(default_factory=FeatureConfig)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bands(self) -> int:
        return self.values.shape[1]


@dataclass
class F0Track:
    """Per-frame fundamental frequency; 0 Hz marks unvoiced frames."""

    f0_hz: np.ndarray
    voiced: np.ndarray

    def __post_init__(self):
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.f0_hz.shape != self.voiced.shape:
            raise ValueError("f0 and voiced flags must share shape")
        if np.any((self.f0_hz == 0) & self.voiced) or np.any((self.f0_hz != 0) & ~self.voiced):
            raise ValueError("voiced flag inconsistent with f0 == 0 convention")

    @property
    def n_frames(self) -> int:
        return len(self.f0_hz)


@dataclass(frozen=True)
class CorpusStats:
    """Log-F0 range over voiced frames of a training corpus."""

    log_f0_min: float
    log_f0_max: float


def load_wav(path) -> AudioClip:
    """Load a mono PCM or float WAV file, normalized to [-1, 1]."""
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise AudioError(f"{path}: unsupported WAV encoding: {exc}") from exc
    if data.ndim > 1:
        raise AudioError(f"{path}: channels unsupported ({data.shape[1]} channels, need mono)")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported WAV encoding (dtype {data.dtype}, need 16-bit PCM or float)")
    return AudioClip(samples=samples, sample_rate=int(rate))


def save_wav(path, clip: AudioClip):
    """Write a clip as 16-bit PCM WAV (values clipped to full scale)."""
    scaled = np.clip(clip.samples, -1.0, 1.0 - 1.0 / 32768.0)
    wavfile.write(path, clip.sample_rate, (scaled * 32768.0).astype(np.int16))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_bands, f_lo, f_hi, n_fft, sample_rate):
    """Triangular filters with peaks equally spaced on the mel scale.

    Returns a matrix of shape [n_bands, n_fft // 2 + 1]. Triangles are built
    in the frequency domain (not snapped to bins), so every FFT bin strictly
    inside [f_lo, f_hi] receives weight from at least one filter.
    """
    nyquist = sample_rate / 2.0
    if not (0 <= f_lo < f_hi):
        raise ValueError(f"need 0 <= f_lo < f_hi, got {f_lo}, {f_hi}")
    if f_hi > nyquist:
        raise ValueError(f"f_hi {f_hi} Hz above Nyquist {nyquist} Hz")
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), n_bands + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_bands, len(bin_hz)))
    for b in range(n_bands):
        lo, peak, hi = edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]
        rising = (bin_hz - lo) / (peak - lo)
        falling = (hi - bin_hz) / (hi - peak)
        fb[b] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def filterbank_peaks(config: FeatureConfig) -> np.ndarray:
    """Peak (center) frequency in Hz of each mel band."""
    edges_hz = mel_to_hz(
        np.linspace(hz_to_mel(config.fmin_hz), hz_to_mel(config.fmax_hz), config.n_bands + 2)
    )
    return edges_hz[1:-1]


def _stft_magnitude(samples: np.ndarray, config: FeatureConfig) -> np.ndarray:
    win = config.win_samples
    hop = config.hop_samples
    n_fft = config.n_fft
    n_frames = config.n_frames(len(samples))
    # Center-padded framing: frame t is windowed around sample t * hop.
    padded = np.concatenate([np.zeros(win // 2), samples, np.zeros(win // 2 + hop)])
    window = np.hanning(win)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * window[None, :]
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=1))


def compute_mel(clip: AudioClip, config: FeatureConfig | None = None) -> MelSpectrogram:
    """Log mel-spectrogram of a clip; frame count is len(samples)//hop + 1."""
    config = config or FeatureConfig()
    if len(clip.samples) < config.win_samples:
        raise ValueError(
            f"clip too short: {len(clip.samples)} samples < one {config.win_samples}-sample window"
        )
    if clip.sample_rate != config.sample_rate:
        raise ValueError(f"clip rate {clip.sample_rate} != config rate {config.sample_rate}")
    mag = _stft_magnitude(clip.samples, config)
    fb = mel_filterbank(config.n_bands, config.fmin_hz, config.fmax_hz, config.n_fft, config.sample_rate)
    energy = mag @ fb.T
    values = np.log(np.maximum(energy, config.log_floor))
    return MelSpectrogram(values=values, config=config)


def _scale_frames(values: np.ndarray, n_out: int) -> np.ndarray:
    """Linear interpolation along the frame axis to exactly n_out frames."""
    n_in = values.shape[0]
    if n_in == n_out:
        return values.copy()
    if n_in == 1:
        return np.repeat(values, n_out, axis=0)
    src = np.linspace(0.0, n_in - 1.0, n_out)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (src - lo)[:, None]
    return values[lo] * (1.0 - frac) + values[hi] * frac


def transpose_augment(
    clip: AudioClip, labels_frames: int, factor: float, config: FeatureConfig | None = None
) -> MelSpectrogram:
    """Pitch-transposed log-mel, time-scaled back to the label frame grid.

    The audio is resampled so every frequency scales by ``factor`` (duration
    scales by 1/factor), analyzed, and the resulting mel matrix is linearly
    interpolated along time to exactly ``labels_frames`` frames so it stays
    aligned with the untouched frame labels.
    """
    config = config or FeatureConfig()
    if factor <= 0:
        raise ValueError(f"transposition factor must be > 0, got {factor}")
    if factor == 1.0:
        resampled = clip
    else:
        # Polyphase windowed-sinc resampling; up/down is a rational
        # approximation of 1/factor so frequencies scale by ~factor exactly.
        ratio = Fraction(1.0 / factor).limit_denominator(1000)
        resampled = AudioClip(
            samples=resample_poly(clip.samples, ratio.numerator, ratio.denominator),
            sample_rate=clip.sample_rate,
        )
    mel = compute_mel(resampled, config)
    return MelSpectrogram(values=_scale_frames(mel.values, labels_frames), config=config)


def normalize_f0(track: F0Track, stats: CorpusStats) -> np.ndarray:
    """Two conditioning channels per frame: scaled log-F0 and voiced flag.

    Channel 0 maps log-F0 linearly from [log_f0_min, log_f0_max] to [-1, 1]
    (clipped outside the range), holding the last voiced value across
    unvoiced runs and 0 before the first voiced frame. Channel 1 is the
    voiced flag in {0, 1}.
    """
    if track.n_frames == 0:
        raise ValueError("empty F0 track")
    span = stats.log_f0_max - stats.log_f0_min
    if span <= 0:
        raise ValueError("degenerate corpus stats: log_f0_max <= log_f0_min")
    out = np.zeros((track.n_frames, 2))
    held = None
    for t in range(track.n_frames):
        if track.voiced[t]:
            scaled = 2.0 * (np.log(track.f0_hz[t]) - stats.log_f0_min) / span - 1.0
            held = float(np.clip(scaled, -1.0, 1.0))
        out[t, 0] = 0.0 if held is None else held
        out[t, 1] = 1.0 if track.voiced[t] else 0.0
    return out


def corpus_f0_stats(tracks) -> CorpusStats:
    """Log-F0 min/max over voiced frames of the given tracks."""
    voiced_values = np.concatenate([t.f0_hz[t.voiced] for t in tracks if np.any(t.voiced)])
    if voiced_values.size == 0:
        raise ValueError("no voiced frames in corpus")
    logs = np.log(voiced_values)
    return CorpusStats(log_f0_min=float(logs.min()), log_f0_max=float(logs.max()))

"""Inference drivers: render mel from timed phones + F0, convert voices from
audio, and turn predicted mel back into audio with iterative phase
reconstruction (a plain classical utility, not a learned vocoder).

Input text formats, one entry per line, '#' comments allowed:
    phone timing file:  "<phone> <start_s> <end_s>"
    F0 file:            "<time_s> <f0_hz>"   (0 Hz = unvoiced)
"""

from __future__ import annotations

import numpy as np
import torch

from . import container
from .corpus import PhoneInventory
from .dsp import (
    AudioClip,
    CorpusStats,
    F0Track,
    FeatureConfig,
    MelSpectrogram,
    compute_mel,
    load_wav,
    mel_filterbank,
    normalize_f0,
)
from .train import Checkpoint


def parse_phone_file(path, inventory: PhoneInventory):
    """Timed phone entries [(phone_id, start_s, end_s), ...], validated."""
    segments = []
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'phone start_s end_s', got {raw!r}")
            phone, start, end = parts[0], float(parts[1]), float(parts[2])
            pid = inventory.index(phone)
            if end <= start:
                raise ValueError(f"{path}:{lineno}: end {end} <= start {start}")
            if segments and start < segments[-1][2] - 1e-9:
                raise ValueError(f"{path}:{lineno}: segments overlap")
            segments.append((pid, start, end))
    if not segments:
        raise ValueError(f"{path}: no phone segments")
    return segments


def parse_f0_file(path):
    """(times_s, f0_hz) arrays, times strictly increasing."""
    times, values = [], []
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'time_s f0_hz', got {raw!r}")
            t, hz = float(parts[0]), float(parts[1])
            if times and t <= times[-1]:
                raise ValueError(f"{path}:{lineno}: times must increase")
            if hz < 0:
                raise ValueError(f"{path}:{lineno}: negative F0")
            times.append(t)
            values.append(hz)
    if not times:
        raise ValueError(f"{path}: no F0 points")
    return np.asarray(times), np.asarray(values)


def phones_to_frames(segments, n_frames: int, hop_s: float, sil_id: int) -> np.ndarray:
    """Frame labels: each frame carries the phone active at its center time
    (the rule the corpus generator uses); uncovered frames become silence."""
    out = np.full(n_frames, sil_id, dtype=np.int64)
    centers = np.arange(n_frames) * hop_s
    for i, (pid, start, end) in enumerate(segments):
        if i == len(segments) - 1:
            sel = (centers >= start) & (centers <= end + 1e-9)  # final frame inclusive
        else:
            sel = (centers >= start) & (centers < end)
        out[sel] = pid
    return out


def f0_to_frames(times, values, n_frames: int, hop_s: float) -> F0Track:
    """F0 sampled at frame centers; linear between voiced points, zero where
    either neighbor is unvoiced."""
    centers = np.arange(n_frames) * hop_s
    f0 = np.interp(centers, times, values)
    voiced_flags = (np.interp(centers, times, (values > 0).astype(float)) >= 0.999) & (f0 > 0)
    f0 = np.where(voiced_flags, f0, 0.0)
    return F0Track(f0_hz=f0, voiced=f0 > 0)


def save_mel_container(path, mel: np.ndarray, config: FeatureConfig, meta=None):
    base = {
        "kind": "mel",
        "feature_fingerprint": config.fingerprint(),
        "n_frames": int(mel.shape[0]),
        "n_bands": int(mel.shape[1]),
        "hop_ms": config.hop_ms,
    }
    base.update(meta or {})
    container.write_container(path, {"mel": mel.astype(np.float32)}, base)


def load_mel_container(path) -> tuple[np.ndarray, dict]:
    arrays, meta = container.read_container(path)
    if meta.get("kind") != "mel" or "mel" not in arrays:
        raise container.ContainerError(f"{path}: not a mel container")
    return arrays["mel"], meta


def _resolve_speaker(ckpt: Checkpoint, speaker) -> int:
    try:
        singer_id = int(speaker)
    except (TypeError, ValueError):
        raise ValueError(f"speaker must be a singer id, got {speaker!r}")
    if singer_id not in ckpt.speaker_map:
        raise ValueError(
            f"unknown speaker {singer_id}; checkpoint knows singers {sorted(ckpt.speaker_map)}"
        )
    return ckpt.speaker_map[singer_id]


def synthesize_from_files(
    ckpt: Checkpoint, phone_path, f0_path, speaker, out_path, wav_path=None
) -> np.ndarray:
    """Render a mel container (optional WAV) from timed phones and an F0 track.

    The phone and F0 files must cover the same duration within one frame.
    """
    cfg = ckpt.feature_config
    hop_s = cfg.hop_ms / 1000.0
    segments = parse_phone_file(phone_path, ckpt.inventory)
    times, values = parse_f0_file(f0_path)
    phone_dur = segments[-1][2]
    if abs(phone_dur - times[-1]) > hop_s + 1e-9:
        raise ValueError(
            f"duration mismatch: phones cover {phone_dur:.3f} s but F0 covers {times[-1]:.3f} s "
            f"(more than one {hop_s * 1000:.0f} ms frame apart)"
        )
    n_frames = cfg.n_frames(int(round(phone_dur * cfg.sample_rate)))
    phones = phones_to_frames(segments, n_frames, hop_s, ckpt.inventory.index("sil"))
    track = f0_to_frames(times, values, n_frames, hop_s)
    f0ch = normalize_f0(track, ckpt.f0_stats).astype(np.float32)
    row = _resolve_speaker(ckpt, speaker)

    model = ckpt.build_model().eval()
    torch.set_num_threads(ckpt.train_config.threads)
    pred = model.infer_autoregressive(
        torch.from_numpy(phones)[None],
        torch.from_numpy(f0ch).T[None],
        torch.tensor([row]),
    )[0].T.numpy()
    save_mel_container(out_path, pred, cfg, {"speaker": int(speaker), "source": "synthesis"})
    if wav_path is not None:
        clip = mel_to_audio(pred, cfg)
        from .dsp import save_wav

        save_wav(wav_path, clip)
    return pred


def convert_from_files(ckpt: Checkpoint, wav_path, f0_path, speaker, out_path) -> np.ndarray:
    """Voice conversion: drive the decoder with acoustic input from a WAV file.

    F0 comes from the required F0 file (the toolkit does not estimate pitch).
    """
    if not ckpt.model_config.acoustic_encoder:
        raise ValueError("conversion needs a checkpoint trained with an acoustic encoder")
    cfg = ckpt.feature_config
    clip = load_wav(wav_path)
    mel = compute_mel(clip, cfg)
    times, values = parse_f0_file(f0_path)
    track = f0_to_frames(times, values, mel.n_frames, cfg.hop_ms / 1000.0)
    f0ch = normalize_f0(track, ckpt.f0_stats).astype(np.float32)
    row = _resolve_speaker(ckpt, speaker)

    model = ckpt.build_model().eval()
    torch.set_num_threads(ckpt.train_config.threads)
    pred = model.infer_voice_conversion(
        torch.from_numpy(mel.values.astype(np.float32)).T[None],
        torch.from_numpy(f0ch).T[None],
        torch.tensor([row]),
    )[0].T.numpy()
    save_mel_container(out_path, pred, cfg, {"speaker": int(speaker), "source": "conversion"})
    return pred


# -- classical phase reconstruction --------------------------------------------


def _stft(samples, cfg: FeatureConfig):
    win = np.hanning(cfg.win_samples)
    hop = cfg.hop_samples
    n_frames = cfg.n_frames(len(samples))
    padded = np.concatenate([np.zeros(cfg.win_samples // 2), samples, np.zeros(cfg.win_samples // 2 + hop)])
    idx = np.arange(cfg.win_samples)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(padded[idx] * win[None, :], n=cfg.n_fft, axis=1)


def _istft(spec, n_samples: int, cfg: FeatureConfig):
    win = np.hanning(cfg.win_samples)
    hop = cfg.hop_samples
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1)[:, : cfg.win_samples] * win[None, :]
    pad_len = n_samples + cfg.win_samples + hop
    out = np.zeros(pad_len)
    norm = np.zeros(pad_len)
    for t in range(frames.shape[0]):
        start = t * hop
        out[start : start + cfg.win_samples] += frames[t]
        norm[start : start + cfg.win_samples] += win ** 2
    out = out / np.maximum(norm, 1e-8)
    return out[cfg.win_samples // 2 : cfg.win_samples // 2 + n_samples]


def mel_to_audio(mel_values: np.ndarray, cfg: FeatureConfig, n_iter: int = 32) -> AudioClip:
    """Iterative phase reconstruction from a log-mel matrix.

    Inverts the mel filterbank with its pseudo-inverse and alternates between
    the time and frequency domains keeping the target magnitude.
    """
    fb = mel_filterbank(cfg.n_bands, cfg.fmin_hz, cfg.fmax_hz, cfg.n_fft, cfg.sample_rate)
    energy = np.exp(mel_values)
    magnitude = np.maximum(energy @ np.linalg.pinv(fb).T, 0.0)
    n_frames = mel_values.shape[0]
    n_samples = (n_frames - 1) * cfg.hop_samples + 1
    rng = np.random.default_rng(0)
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    spec = magnitude * phase
    for _ in range(n_iter):
        audio = _istft(spec, n_samples, cfg)
        spec_new = _stft(audio, cfg)[:n_frames]
        spec = magnitude * np.exp(1j * np.angle(spec_new))
    audio = _istft(spec, n_samples, cfg)
    peak = np.max(np.abs(audio))
    if peak > 1.0:
        audio = audio / peak
    return AudioClip(samples=audio, sample_rate=cfg.sample_rate)

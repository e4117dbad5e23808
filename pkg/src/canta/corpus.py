"""Synthetic labelled singing corpus and aligned feature datasets.

A small source-filter generator stands in for real recordings: vowels are
impulse trains with vibrato passed through per-singer formant resonators,
consonants are band-filtered noise, silence is exact zeros. Because the
corpus is synthesized, frame-accurate phone labels and F0 come for free and
are exact by construction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from . import container
from .dsp import (
    AudioClip,
    CorpusStats,
    F0Track,
    FeatureConfig,
    MelSpectrogram,
    compute_mel,
    corpus_f0_stats,
    normalize_f0,
    transpose_augment,
)

DEFAULT_SYMBOLS = ("sil", "a", "e", "i", "o", "u", "er", "s", "sh", "f", "th", "h")
VOWELS = ("a", "e", "i", "o", "u", "er")
CONSONANTS = ("s", "sh", "f", "th", "h")

# Canonical first three formants (Hz) per vowel and their bandwidths.
_VOWEL_FORMANTS = {
    "a": (730.0, 1090.0, 2440.0),
    "e": (530.0, 1840.0, 2480.0),
    "i": (270.0, 2290.0, 3010.0),
    "o": (570.0, 840.0, 2410.0),
    "u": (300.0, 870.0, 2240.0),
    "er": (490.0, 1350.0, 1690.0),
}
_FORMANT_BANDWIDTHS = (80.0, 110.0, 160.0)

# Noise band center / bandwidth (Hz) and gain per consonant.
_CONSONANT_BANDS = {
    "s": (6500.0, 2000.0, 0.18),
    "sh": (3200.0, 1500.0, 0.20),
    "f": (2200.0, 2500.0, 0.12),
    "th": (1800.0, 1800.0, 0.10),
    "h": (1000.0, 1200.0, 0.10),
}


@dataclass(frozen=True)
class PhoneInventory:
    symbols: tuple = DEFAULT_SYMBOLS

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("phone symbols must be unique")
        if "sil" not in self.symbols:
            raise ValueError("inventory must contain 'sil'")
        if len(self.symbols) < 2:
            raise ValueError("inventory needs at least 2 symbols")

    @property
    def size(self) -> int:
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            raise KeyError(f"unknown phone symbol {symbol!r}; known: {', '.join(self.symbols)}")


@dataclass
class SingerSpec:
    singer_id: int
    formants: dict  # vowel -> (f1, f2, f3) Hz
    bandwidths: tuple
    f0_min_hz: float
    f0_max_hz: float
    vibrato_rate_hz: float
    vibrato_depth_cents: float


@dataclass
class Utterance:
    audio: AudioClip
    mel: MelSpectrogram
    phone_ids: np.ndarray
    f0: F0Track
    singer_id: int

    def __post_init__(self):
        counts = {self.mel.n_frames, len(self.phone_ids), self.f0.n_frames}
        if len(counts) != 1:
            raise ValueError(f"misaligned frame counts: {counts}")

    @property
    def n_frames(self) -> int:
        return self.mel.n_frames

    @property
    def duration_s(self) -> float:
        return self.audio.duration_s


def generate_singer(seed: int, inventory: PhoneInventory | None = None) -> SingerSpec:
    """Deterministic singer: jittered vowel formants, F0 range, vibrato."""
    rng = np.random.default_rng(seed)
    tract_scale = rng.uniform(0.88, 1.15)
    formants = {}
    for vowel, canon in _VOWEL_FORMANTS.items():
        jitter = rng.uniform(0.95, 1.05, size=3)
        values = tuple(float(f * tract_scale * j) for f, j in zip(canon, jitter))
        if not (values[0] < values[1] < values[2]):
            values = tuple(sorted(values))
        formants[vowel] = values
    f0_min = rng.uniform(110.0, 210.0)
    return SingerSpec(
        singer_id=seed,
        formants=formants,
        bandwidths=_FORMANT_BANDWIDTHS,
        f0_min_hz=float(f0_min),
        f0_max_hz=float(f0_min * rng.uniform(1.9, 2.4)),
        vibrato_rate_hz=float(rng.uniform(4.5, 6.5)),
        vibrato_depth_cents=float(rng.uniform(10.0, 30.0)),
    )


def _resonator_coeffs(center_hz: float, bandwidth_hz: float, sample_rate: int):
    r = math.exp(-math.pi * bandwidth_hz / sample_rate)
    theta = 2.0 * math.pi * center_hz / sample_rate
    return np.array([1.0 - r]), np.array([1.0, -2.0 * r * math.cos(theta), r * r])


def _impulse_train(note_hz: float, n: int, sample_rate: int, spec: SingerSpec, phase0: float):
    """Impulse train whose instantaneous frequency carries vibrato.

    Returns (samples, instantaneous frequency per sample).
    """
    t = np.arange(n) / sample_rate
    depth = 2.0 ** (
        spec.vibrato_depth_cents / 1200.0 * np.sin(2.0 * math.pi * spec.vibrato_rate_hz * t + phase0)
    )
    freq = note_hz * depth
    phase = np.cumsum(freq) / sample_rate
    marks = np.floor(phase)
    prev = np.concatenate([[0.0], marks[:-1]])
    source = (marks > prev).astype(np.float64)
    source[0] = 1.0
    return source, freq


def synthesize_utterance(
    spec: SingerSpec,
    phone_seq,
    note_seq,
    seed: int,
    config: FeatureConfig | None = None,
) -> Utterance:
    """Render audio plus exact frame labels and F0 for a phone/note script.

    ``phone_seq`` is a list of (symbol, duration_s); ``note_seq`` a list of
    (f0_hz, duration_s) defining the pitch target over time (applied wherever
    a vowel sounds). Deterministic in ``seed``.
    """
    config = config or FeatureConfig()
    inventory = PhoneInventory()
    sr = config.sample_rate
    rng = np.random.default_rng(seed)

    for phone, dur in phone_seq:
        if dur <= 0:
            raise ValueError(f"non-positive duration for phone {phone!r}")
    total_s = sum(dur for _, dur in phone_seq)
    n_samples = int(round(total_s * sr))

    # Pitch target per sample, piecewise constant over notes.
    note_target = np.zeros(n_samples)
    cursor = 0
    for hz, dur in note_seq:
        if not (spec.f0_min_hz <= hz <= spec.f0_max_hz):
            raise ValueError(
                f"note {hz:.1f} Hz outside singer range [{spec.f0_min_hz:.1f}, {spec.f0_max_hz:.1f}]"
            )
        end = min(n_samples, cursor + int(round(dur * sr)))
        note_target[cursor:end] = hz
        cursor = end
    if cursor < n_samples:
        note_target[cursor:] = note_target[cursor - 1] if cursor > 0 else spec.f0_min_hz

    audio = np.zeros(n_samples)
    f0_samples = np.zeros(n_samples)
    phone_per_sample = np.zeros(n_samples, dtype=np.int64)

    start = 0
    for phone, dur in phone_seq:
        end = min(n_samples, start + int(round(dur * sr)))
        if phone == "sil" or start >= end:
            start = end
            continue
        seg_len = end - start
        phone_per_sample[start:end] = inventory.index(phone)
        if phone in VOWELS:
            note = float(np.median(note_target[start:end]))
            source, freq = _impulse_train(note, seg_len, sr, spec, rng.uniform(0, 2 * math.pi))
            voiced = source * 12.0
            for center, bw in zip(spec.formants[phone], spec.bandwidths):
                b, a = _resonator_coeffs(center, bw, sr)
                voiced = lfilter(b, a, voiced)
            audio[start:end] = voiced
            f0_samples[start:end] = freq
        elif phone in CONSONANTS:
            center, bw, gain = _CONSONANT_BANDS[phone]
            noise = rng.standard_normal(seg_len)
            b, a = _resonator_coeffs(min(center, sr / 2 * 0.95), bw, sr)
            audio[start:end] = lfilter(b, a, noise) * gain * 8.0
        else:
            raise ValueError(f"phone {phone!r} not in the synthesis inventory")
        start = end

    peak = np.max(np.abs(audio))
    if peak > 0:
        audio = audio * (0.5 / max(peak, 0.5))

    clip = AudioClip(samples=audio, sample_rate=sr)
    mel = compute_mel(clip, config)
    hop = config.hop_samples
    centers = np.minimum(np.arange(mel.n_frames) * hop, n_samples - 1)
    phone_ids = phone_per_sample[centers]
    f0_hz = f0_samples[centers]
    voiced = f0_hz > 0
    return Utterance(
        audio=clip,
        mel=mel,
        phone_ids=phone_ids,
        f0=F0Track(f0_hz=f0_hz, voiced=voiced),
        singer_id=spec.singer_id,
    )


def _random_song_script(spec: SingerSpec, rng, duration_s: float):
    """Random phrase: silence-separated groups of consonant + held vowel notes."""
    semitone = 2.0 ** (1.0 / 12.0)
    n_notes = int(math.log(spec.f0_max_hz / spec.f0_min_hz) / math.log(semitone))
    phones = [("sil", rng.uniform(0.25, 0.5))]
    notes = [(spec.f0_min_hz, phones[0][1])]
    total = phones[0][1]
    while total < duration_s:
        if rng.random() < 0.55:
            c = CONSONANTS[rng.integers(len(CONSONANTS))]
            dur = rng.uniform(0.08, 0.2)
            phones.append((c, dur))
            notes.append((spec.f0_min_hz * semitone ** rng.integers(0, n_notes + 1), dur))
            total += dur
        for _ in range(rng.integers(1, 3)):
            v = VOWELS[rng.integers(len(VOWELS))]
            dur = rng.uniform(0.4, 1.2)
            phones.append((v, dur))
            notes.append((spec.f0_min_hz * semitone ** rng.integers(0, n_notes + 1), dur))
            total += dur
        if rng.random() < 0.4:
            dur = rng.uniform(0.2, 0.45)
            phones.append(("sil", dur))
            notes.append((spec.f0_min_hz, dur))
            total += dur
    phones.append(("sil", rng.uniform(0.25, 0.5)))
    notes.append((spec.f0_min_hz, phones[-1][1]))
    return phones, notes


@dataclass
class Corpus:
    """Train/validation utterance sets mirroring a multi-singer study layout.

    Singers 0..n-2 form the supervised multi-singer pool; the last singer is
    held out as the adaptation target with its own train/validation split and
    a ~3 minute cloning subset.
    """

    inventory: PhoneInventory
    feature_config: FeatureConfig
    singers: list
    train_multi: list
    val_multi: list
    target_train: list
    target_val: list
    target_clone: list
    f0_stats: CorpusStats
    seed: int


def build_corpus(
    n_singers: int = 5,
    songs_per_singer: int = 10,
    val_songs: int = 1,
    seed: int = 0,
    config: FeatureConfig | None = None,
    song_seconds: tuple = (10.0, 16.0),
    target_songs: int = 16,
    clone_seconds: float = 180.0,
) -> Corpus:
    """Generate a deterministic multi-singer corpus with a held-out target.

    Per singer, ``val_songs`` songs go to validation and the rest to training;
    the target singer (the last one) gets ``target_songs`` songs and a cloning
    subset of roughly ``clone_seconds`` of audio.
    """
    if n_singers < 1:
        raise ValueError("need at least one singer")
    if val_songs >= songs_per_singer or val_songs >= target_songs:
        raise ValueError("validation split leaves no training songs")
    config = config or FeatureConfig()
    inventory = PhoneInventory()
    root = np.random.SeedSequence(seed)
    singers = []
    for idx, ss in enumerate(root.spawn(n_singers)):
        spec = generate_singer(int(ss.generate_state(1)[0]), inventory)
        spec.singer_id = idx
        singers.append(spec)

    def make_songs(spec, n_songs, singer_key):
        utts = []
        for song_idx in range(n_songs):
            ss = np.random.SeedSequence(entropy=seed, spawn_key=(singer_key, song_idx))
            rng = np.random.default_rng(ss)
            duration = rng.uniform(*song_seconds)
            phones, notes = _random_song_script(spec, rng, duration)
            utts.append(
                synthesize_utterance(spec, phones, notes, int(ss.generate_state(2)[1]), config)
            )
        return utts

    train_multi, val_multi = [], []
    for idx, spec in enumerate(singers[:-1]):
        songs = make_songs(spec, songs_per_singer, idx)
        val_multi.extend(songs[:val_songs])
        train_multi.extend(songs[val_songs:])

    target = singers[-1]
    songs = make_songs(target, target_songs, n_singers - 1)
    target_val = songs[:val_songs]
    target_train = songs[val_songs:]
    target_clone = []
    acc = 0.0
    for utt in target_train:
        target_clone.append(utt)
        acc += utt.duration_s
        if acc >= clone_seconds:
            break

    if not train_multi or not target_train:
        raise ValueError("split leaves an empty training set")
    stats = corpus_f0_stats([u.f0 for u in train_multi])
    return Corpus(
        inventory=inventory,
        feature_config=config,
        singers=singers,
        train_multi=train_multi,
        val_multi=val_multi,
        target_train=target_train,
        target_val=target_val,
        target_clone=target_clone,
        f0_stats=stats,
        seed=seed,
    )


# -- feature sets -------------------------------------------------------------


def augment_key(semitones: int) -> str:
    return f"shift{semitones:+d}"


@dataclass
class FeatureItem:
    mel: np.ndarray  # (frames, n_bands) float32
    phone_ids: np.ndarray  # (frames,) int16
    f0_hz: np.ndarray  # (frames,) float32
    voiced: np.ndarray  # (frames,) bool
    singer_id: int
    aug_mels: dict = field(default_factory=dict)  # augment_key -> (frames, n_bands)

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


@dataclass
class FeatureSet:
    """Aligned per-utterance feature arrays plus corpus-level metadata."""

    items: list
    inventory: PhoneInventory
    feature_config: FeatureConfig
    f0_stats: CorpusStats

    def __len__(self):
        return len(self.items)

    def f0_channels(self, item: FeatureItem) -> np.ndarray:
        track = F0Track(f0_hz=item.f0_hz.astype(np.float64), voiced=item.voiced)
        return normalize_f0(track, self.f0_stats).astype(np.float32)

    def singer_ids(self):
        return sorted({item.singer_id for item in self.items})


def extract_features(
    utterances,
    f0_stats: CorpusStats,
    inventory: PhoneInventory,
    config: FeatureConfig,
    augment_semitones=(),
) -> FeatureSet:
    """Feature set from utterances, optionally with pitch-shifted mel variants."""
    items = []
    for utt in utterances:
        aug = {}
        for st in augment_semitones:
            factor = 2.0 ** (st / 12.0)
            shifted = transpose_augment(utt.audio, utt.n_frames, factor, config)
            aug[augment_key(st)] = shifted.values.astype(np.float32)
        items.append(
            FeatureItem(
                mel=utt.mel.values.astype(np.float32),
                phone_ids=utt.phone_ids.astype(np.int16),
                f0_hz=utt.f0.f0_hz.astype(np.float32),
                voiced=utt.f0.voiced.copy(),
                singer_id=utt.singer_id,
                aug_mels=aug,
            )
        )
    return FeatureSet(items=items, inventory=inventory, feature_config=config, f0_stats=f0_stats)


def save_features(feature_set: FeatureSet, path):
    """Write a feature set to a named-array container file."""
    arrays = {}
    singer_ids = []
    for i, item in enumerate(feature_set.items):
        prefix = f"utt{i:04d}"
        arrays[f"{prefix}/mel"] = item.mel
        arrays[f"{prefix}/phone"] = item.phone_ids
        arrays[f"{prefix}/f0"] = item.f0_hz
        arrays[f"{prefix}/voiced"] = item.voiced
        for key, mel in item.aug_mels.items():
            arrays[f"{prefix}/mel_{key}"] = mel
        singer_ids.append(int(item.singer_id))
    meta = {
        "kind": "features",
        "n_items": len(feature_set.items),
        "singer_ids": singer_ids,
        "symbols": list(feature_set.inventory.symbols),
        "feature_fingerprint": feature_set.feature_config.fingerprint(),
        "feature_config": {
            "sample_rate": feature_set.feature_config.sample_rate,
            "hop_ms": feature_set.feature_config.hop_ms,
            "win_ms": feature_set.feature_config.win_ms,
            "n_bands": feature_set.feature_config.n_bands,
            "fmin_hz": feature_set.feature_config.fmin_hz,
            "fmax_hz": feature_set.feature_config.fmax_hz,
            "log_floor": feature_set.feature_config.log_floor,
        },
        "f0_stats": {
            "log_f0_min": feature_set.f0_stats.log_f0_min,
            "log_f0_max": feature_set.f0_stats.log_f0_max,
        },
    }
    container.write_container(path, arrays, meta)


def load_features(path, expected_config: FeatureConfig | None = None) -> FeatureSet:
    """Load a feature set; rejects containers built with a different analysis config."""
    arrays, meta = container.read_container(path)
    if meta.get("kind") != "features":
        raise container.ContainerError(f"{path}: not a feature container")
    cfg = FeatureConfig(**meta["feature_config"])
    if expected_config is not None and expected_config.fingerprint() != meta["feature_fingerprint"]:
        raise container.ContainerError(
            f"{path}: feature config fingerprint {meta['feature_fingerprint']} does not match "
            f"requested {expected_config.fingerprint()}"
        )
    items = []
    for i in range(meta["n_items"]):
        prefix = f"utt{i:04d}"
        aug = {
            name.split("/mel_", 1)[1]: arr
            for name, arr in arrays.items()
            if name.startswith(f"{prefix}/mel_")
        }
        items.append(
            FeatureItem(
                mel=arrays[f"{prefix}/mel"],
                phone_ids=arrays[f"{prefix}/phone"],
                f0_hz=arrays[f"{prefix}/f0"],
                voiced=arrays[f"{prefix}/voiced"].astype(bool),
                singer_id=int(meta["singer_ids"][i]),
                aug_mels=aug,
            )
        )
    stats = CorpusStats(**meta["f0_stats"])
    return FeatureSet(
        items=items,
        inventory=PhoneInventory(tuple(meta["symbols"])),
        feature_config=cfg,
        f0_stats=stats,
    )


# -- segment batching ----------------------------------------------------------


@dataclass
class SegmentBatch:
    """Stacked aligned slices; loss contributions come only from masked frames."""

    mel_target: np.ndarray  # (batch, frames, n_bands)
    mel_encoder: np.ndarray  # pitch-augmented view of mel_target for the encoder
    phone_ids: np.ndarray  # (batch, frames)
    f0_channels: np.ndarray  # (batch, frames, 2)
    speaker_rows: np.ndarray  # (batch,)
    valid_mask: np.ndarray  # (batch, frames) bool


def segment_iterator(
    feature_set: FeatureSet,
    speaker_rows: dict,
    batch_size: int = 12,
    valid_frames: int = 300,
    context_past: int = 82,
    context_future: int = 43,
    seed: int = 0,
    rng=None,
    augment_keys=(),
    include_phones: bool = True,
):
    """Endless stream of uniformly sampled segment batches.

    Each segment holds ``valid_frames`` loss-bearing frames plus past/future
    context sized to the decoder-through-encoder receptive field. When
    ``augment_keys`` is non-empty the encoder view of each segment is drawn
    uniformly from the identity mel and the named pitch-shifted variants.
    With ``include_phones`` false the phone arrays are never touched and the
    batch carries zeros in their place (audio-only training). Utterances
    shorter than one segment are skipped with a warning.
    """
    total = valid_frames + context_past + context_future
    rng = rng if rng is not None else np.random.default_rng(seed)
    f0ch = {}
    usable = []
    for idx, item in enumerate(feature_set.items):
        if item.n_frames < total:
            warnings.warn(
                f"utterance {idx} too short for segments ({item.n_frames} < {total} frames); skipped"
            )
            continue
        usable.append(idx)
        f0ch[idx] = feature_set.f0_channels(item)
    if not usable:
        raise ValueError("no utterance is long enough for one segment")
    keys = [None] + [k for k in augment_keys]

    mask = np.zeros(total, dtype=bool)
    mask[context_past : context_past + valid_frames] = True

    while True:
        mel_t = np.empty((batch_size, total, feature_set.feature_config.n_bands), dtype=np.float32)
        mel_e = np.empty_like(mel_t)
        phones = np.empty((batch_size, total), dtype=np.int64)
        f0c = np.empty((batch_size, total, 2), dtype=np.float32)
        rows = np.empty(batch_size, dtype=np.int64)
        for b in range(batch_size):
            idx = usable[rng.integers(len(usable))]
            item = feature_set.items[idx]
            start = int(rng.integers(item.n_frames - total + 1))
            sl = slice(start, start + total)
            mel_t[b] = item.mel[sl]
            key = keys[rng.integers(len(keys))] if len(keys) > 1 else None
            if key is None:
                mel_e[b] = item.mel[sl]
            else:
                mel_e[b] = item.aug_mels[key][sl]
            if include_phones:
                phones[b] = item.phone_ids[sl].astype(np.int64)
            else:
                phones[b] = 0
            f0c[b] = f0ch[idx][sl]
            rows[b] = speaker_rows[item.singer_id]
        yield SegmentBatch(
            mel_target=mel_t,
            mel_encoder=mel_e,
            phone_ids=phones,
            f0_channels=f0c,
            speaker_rows=rows,
            valid_mask=np.repeat(mask[None, :], batch_size, axis=0),
        )

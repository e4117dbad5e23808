"""Optimization loops: supervised multi-singer training, audio-only decoder
adaptation, low-data cloning, plus the learning-rate schedule and checkpoints.

All runs are bit-reproducible given (seed, config, dataset): every random
draw comes from explicit generators whose states are checkpointed, so a
resumed run follows the exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, asdict

import numpy as np
import torch

from . import container
from .corpus import FeatureSet, PhoneInventory, SegmentBatch, segment_iterator, augment_key
from .dsp import CorpusStats, FeatureConfig
from .model import (
    ModelConfig,
    NoiseConfig,
    TimbreModel,
    masked_mean_sq,
    system_receptive_field,
)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint):
        super().__init__(f"non-finite loss at step {step}; aborting with checkpoint")
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 12
    base_lr: float = 5e-4
    warmup_steps: int = 700
    decay_factor: float = 0.15
    decay_every: int = 10000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_recon: float = 1.0
    weight_embed: float = 0.2
    sigma_embed: float = 0.3
    sigma_history: float = 0.2
    switch_p: float = 0.5
    valid_frames: int = 300
    clip_norm: float = 5.0
    max_steps: int = 10000
    seed: int = 0
    augment: bool = True
    augment_semitones: tuple = (-4, -2, 2, 4)
    threads: int = 1
    log_every: int = 25

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        for name in ("batch_size", "base_lr", "decay_every", "valid_frames", "max_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def noise(self) -> NoiseConfig:
        return NoiseConfig(
            sigma_embed=self.sigma_embed,
            sigma_history=self.sigma_history,
            switch_p=self.switch_p,
        )

    def fingerprint(self) -> str:
        d = asdict(self)
        d["augment_semitones"] = list(d["augment_semitones"])
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warm-up to base_lr, then smooth exponential decay.

    lr(step) = base_lr * min(step / warmup, 1)
                       * decay_factor^(max(0, step - warmup) / decay_every)
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = min(step / config.warmup_steps, 1.0)
    decay = config.decay_factor ** (max(0, step - config.warmup_steps) / config.decay_every)
    return config.base_lr * warm * decay


def dataset_fingerprint(feature_set: FeatureSet, include_labels: bool = True) -> str:
    """Content hash of a feature set.

    Audio-only phases pass ``include_labels=False`` so that fingerprinting
    never touches the label arrays (the no-annotation contract is testable).
    """
    h = hashlib.sha256()
    h.update(feature_set.feature_config.fingerprint().encode())
    h.update(b"labelled" if include_labels else b"audio-only")
    for item in feature_set.items:
        h.update(np.ascontiguousarray(item.mel).tobytes())
        if include_labels:
            h.update(np.ascontiguousarray(item.phone_ids).tobytes())
        h.update(np.ascontiguousarray(item.f0_hz).tobytes())
        h.update(str(item.singer_id).encode())
    return h.hexdigest()[:16]


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    step: int
    model_arrays: dict
    adam_arrays: dict  # param name -> {"exp_avg", "exp_avg_sq", "step"}
    torch_rng: np.ndarray  # uint8 generator state
    data_rng_state: dict
    speaker_map: dict  # singer_id -> speaker table row
    f0_stats: CorpusStats
    inventory: PhoneInventory
    feature_config: FeatureConfig
    corpus_fingerprint: str
    phase: str  # "supervised" | "adapted" | "cloned"

    def build_model(self) -> TimbreModel:
        model = TimbreModel(self.model_config, seed=self.train_config.seed)
        model.load_arrays(self.model_arrays)
        return model


def save_checkpoint(ckpt: Checkpoint, path):
    arrays = {}
    for name, arr in ckpt.model_arrays.items():
        arrays[f"model/{name}"] = arr
    for name, st in ckpt.adam_arrays.items():
        arrays[f"adam/{name}/exp_avg"] = st["exp_avg"]
        arrays[f"adam/{name}/exp_avg_sq"] = st["exp_avg_sq"]
        arrays[f"adam/{name}/step"] = st["step"]
    arrays["rng/torch"] = ckpt.torch_rng
    mc = asdict(ckpt.model_config)
    for key in ("encoder_dilations", "context_dilations", "frame_dilations"):
        mc[key] = list(mc[key])
    tc = asdict(ckpt.train_config)
    tc["augment_semitones"] = list(tc["augment_semitones"])
    meta = {
        "kind": "checkpoint",
        "phase": ckpt.phase,
        "step": ckpt.step,
        "model_config": mc,
        "model_fingerprint": ckpt.model_config.fingerprint(),
        "train_config": tc,
        "data_rng_state": ckpt.data_rng_state,
        "speaker_map": {str(k): v for k, v in ckpt.speaker_map.items()},
        "f0_stats": asdict(ckpt.f0_stats),
        "symbols": list(ckpt.inventory.symbols),
        "feature_config": asdict(ckpt.feature_config),
        "corpus_fingerprint": ckpt.corpus_fingerprint,
    }
    container.write_container(path, arrays, meta)


def load_checkpoint(path, expect_model_fingerprint: str | None = None) -> Checkpoint:
    arrays, meta = container.read_container(path)
    if meta.get("kind") != "checkpoint":
        raise container.ContainerError(f"{path}: not a checkpoint container")
    if expect_model_fingerprint is not None and meta["model_fingerprint"] != expect_model_fingerprint:
        raise container.ContainerError(
            f"{path}: architecture fingerprint {meta['model_fingerprint']} does not match "
            f"expected {expect_model_fingerprint}"
        )
    mc = dict(meta["model_config"])
    for key in ("encoder_dilations", "context_dilations", "frame_dilations"):
        mc[key] = tuple(mc[key])
    tc = dict(meta["train_config"])
    tc["augment_semitones"] = tuple(tc["augment_semitones"])
    model_arrays, adam_arrays = {}, {}
    for name, arr in arrays.items():
        if name.startswith("model/"):
            model_arrays[name[len("model/") :]] = arr
        elif name.startswith("adam/"):
            pname, field = name[len("adam/") :].rsplit("/", 1)
            adam_arrays.setdefault(pname, {})[field] = arr
    return Checkpoint(
        model_config=ModelConfig(**mc),
        train_config=TrainConfig(**tc),
        step=int(meta["step"]),
        model_arrays=model_arrays,
        adam_arrays=adam_arrays,
        torch_rng=arrays["rng/torch"],
        data_rng_state=meta["data_rng_state"],
        speaker_map={int(k): int(v) for k, v in meta["speaker_map"].items()},
        f0_stats=CorpusStats(**meta["f0_stats"]),
        inventory=PhoneInventory(tuple(meta["symbols"])),
        feature_config=FeatureConfig(**meta["feature_config"]),
        corpus_fingerprint=meta["corpus_fingerprint"],
        phase=meta.get("phase", "supervised"),
    )


def check_features_compatible(ckpt: Checkpoint, feature_set: FeatureSet):
    """Reject feature sets whose analysis or normalization differ from training."""
    if feature_set.feature_config.fingerprint() != ckpt.feature_config.fingerprint():
        raise container.ContainerError("feature analysis config differs from the checkpoint's")
    if tuple(feature_set.inventory.symbols) != tuple(ckpt.inventory.symbols):
        raise container.ContainerError("phone inventory differs from the checkpoint's")
    if (
        feature_set.f0_stats.log_f0_min != ckpt.f0_stats.log_f0_min
        or feature_set.f0_stats.log_f0_max != ckpt.f0_stats.log_f0_max
    ):
        raise container.ContainerError("F0 normalization stats differ from the checkpoint's")


# -- internal loop -------------------------------------------------------------


def _batch_to_tensors(batch: SegmentBatch):
    return {
        "mel_target": torch.from_numpy(batch.mel_target).transpose(1, 2).contiguous(),
        "mel_encoder": torch.from_numpy(batch.mel_encoder).transpose(1, 2).contiguous(),
        "phones": torch.from_numpy(batch.phone_ids),
        "f0_channels": torch.from_numpy(batch.f0_channels).transpose(1, 2).contiguous(),
        "speakers": torch.from_numpy(batch.speaker_rows),
        "mask": torch.from_numpy(batch.valid_mask),
    }


def _adam_state_arrays(optimizer, named_params):
    out = {}
    for name, p in named_params:
        st = optimizer.state.get(p)
        if st is None:
            continue
        out[name] = {
            "exp_avg": st["exp_avg"].numpy().copy(),
            "exp_avg_sq": st["exp_avg_sq"].numpy().copy(),
            "step": np.asarray(float(st["step"])),
        }
    return out


def _restore_adam_state(optimizer, named_params, adam_arrays):
    for name, p in named_params:
        if name not in adam_arrays:
            continue
        st = adam_arrays[name]
        optimizer.state[p] = {
            "step": torch.tensor(float(st["step"])),
            "exp_avg": torch.from_numpy(st["exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(st["exp_avg_sq"].copy()),
        }


class _Logger:
    def __init__(self, path=None, callback=None, every=25):
        self.f = open(path, "a") if path else None
        self.callback = callback
        self.every = every
        self.history = []

    def log(self, record):
        self.history.append(record)
        if self.f is not None:
            self.f.write(json.dumps(record) + "\n")
            self.f.flush()
        if self.callback is not None and (
            record["step"] % self.every == 0 or record["step"] == 1
        ):
            self.callback(record)

    def close(self):
        if self.f is not None:
            self.f.close()


@dataclass
class _Run:
    model: TimbreModel
    feature_set: FeatureSet
    speaker_map: dict
    cfg: TrainConfig
    noise: NoiseConfig
    include_phones: bool
    acoustic_only: bool  # decoder driven by the acoustic encoder alone, recon loss only
    augment_keys: list
    logger: _Logger
    phase: str
    corpus_fp: str = ""
    start_step: int = 0

    def __post_init__(self):
        # Offsets keep these streams clear of the model-init generators.
        self.torch_gen = torch.Generator().manual_seed(self.cfg.seed + 101)
        self.data_rng = np.random.default_rng(self.cfg.seed + 202)
        if not self.corpus_fp:
            self.corpus_fp = dataset_fingerprint(self.feature_set, include_labels=self.include_phones)
        params = [p for p in self.model.parameters() if p.requires_grad]
        self.params = params
        self.optimizer = torch.optim.Adam(
            params,
            lr=0.0,
            betas=(self.cfg.adam_beta1, self.cfg.adam_beta2),
            eps=self.cfg.adam_eps,
        )

    def checkpoint(self, step: int) -> Checkpoint:
        named = list(self.model.named_parameters())
        return Checkpoint(
            model_config=self.model.config,
            train_config=self.cfg,
            step=step,
            model_arrays=self.model.named_arrays(),
            adam_arrays=_adam_state_arrays(self.optimizer, named),
            torch_rng=self.torch_gen.get_state().numpy().astype(np.uint8),
            data_rng_state=self.data_rng.bit_generator.state,
            speaker_map=dict(self.speaker_map),
            f0_stats=self.feature_set.f0_stats,
            inventory=self.feature_set.inventory,
            feature_config=self.feature_set.feature_config,
            corpus_fingerprint=self.corpus_fp,
            phase=self.phase,
        )

    def resume(self, ckpt: Checkpoint):
        self.model.load_arrays(ckpt.model_arrays)
        self.torch_gen.set_state(torch.from_numpy(ckpt.torch_rng.copy()))
        self.data_rng.bit_generator.state = ckpt.data_rng_state
        _restore_adam_state(self.optimizer, list(self.model.named_parameters()), ckpt.adam_arrays)
        self.start_step = ckpt.step

    def _loss(self, batch):
        if self.acoustic_only:
            embedding = self.model.encode_acoustic(batch["mel_encoder"])
            control = self.model.build_control(batch["f0_channels"], batch["speakers"])
            pred = self.model.decode_teacher_forced(
                embedding, control, batch["mel_target"], self.noise, self.torch_gen
            )
            recon = masked_mean_sq(batch["mel_target"] - pred, batch["mask"])
            return self.cfg.weight_recon * recon, recon, torch.zeros(())
        terms = self.model.loss_terms(
            batch["mel_target"],
            batch["mel_encoder"],
            batch["phones"],
            batch["f0_channels"],
            batch["speakers"],
            batch["mask"],
            self.noise,
            weight_recon=self.cfg.weight_recon,
            weight_embed=self.cfg.weight_embed,
            generator=self.torch_gen,
        )
        return terms.total, terms.recon, terms.embed

    def run(self) -> Checkpoint:
        rf = system_receptive_field(self.model.config)
        iterator = segment_iterator(
            self.feature_set,
            self.speaker_map,
            batch_size=self.cfg.batch_size,
            valid_frames=self.cfg.valid_frames,
            context_past=rf["system_past"],
            context_future=rf["system_future"],
            rng=self.data_rng,
            augment_keys=self.augment_keys,
            include_phones=self.include_phones,
        )
        try:
            for step in range(self.start_step + 1, self.cfg.max_steps + 1):
                batch = _batch_to_tensors(next(iterator))
                lr = lr_schedule(step, self.cfg)
                for group in self.optimizer.param_groups:
                    group["lr"] = lr
                self.optimizer.zero_grad(set_to_none=True)
                total, recon, embed = self._loss(batch)
                if not torch.isfinite(total):
                    raise TrainingDiverged(step, self.checkpoint(step - 1))
                total.backward()
                torch.nn.utils.clip_grad_norm_(self.params, self.cfg.clip_norm)
                self.optimizer.step()
                self.logger.log(
                    {
                        "step": step,
                        "lr": lr,
                        "loss": float(total.detach()),
                        "recon": float(recon.detach()),
                        "embed": float(embed.detach()),
                        "wall_time": time.time(),
                    }
                )
        finally:
            self.logger.close()
        return self.checkpoint(self.cfg.max_steps)


def _require_augment_keys(feature_set: FeatureSet, cfg: TrainConfig, model_config: ModelConfig):
    if not (cfg.augment and model_config.acoustic_encoder):
        return []
    keys = [augment_key(st) for st in cfg.augment_semitones]
    for key in keys:
        if any(key not in item.aug_mels for item in feature_set.items):
            raise ValueError(
                f"dataset lacks pitch-shift variant {key!r}; regenerate features with augmentation"
            )
    return keys


def train_supervised(
    feature_set: FeatureSet,
    model_config: ModelConfig,
    cfg: TrainConfig,
    log_path=None,
    progress=None,
    resume_from: Checkpoint | None = None,
) -> Checkpoint:
    """Joint supervised training of encoders, decoders and the speaker table.

    Per batch the encoder switch, embedding noise and history noise are drawn
    fresh, and each acoustic-encoder input is a randomly pitch-shifted variant
    of the target segment (the linguistic input and the reconstruction target
    are untouched). Aborts with a checkpoint if the loss turns non-finite.
    """
    torch.set_num_threads(cfg.threads)
    speaker_map = {sid: row for row, sid in enumerate(feature_set.singer_ids())}
    model_config = model_config.with_speakers(len(speaker_map))
    run = _Run(
        model=TimbreModel(model_config, seed=cfg.seed),
        feature_set=feature_set,
        speaker_map=speaker_map,
        cfg=cfg,
        noise=cfg.noise(),
        include_phones=True,
        acoustic_only=False,
        augment_keys=_require_augment_keys(feature_set, cfg, model_config),
        logger=_Logger(log_path, progress, cfg.log_every),
        phase="supervised",
    )
    if resume_from is not None:
        if resume_from.model_config.fingerprint() != model_config.fingerprint():
            raise container.ContainerError("resume checkpoint has a different architecture")
        if resume_from.corpus_fingerprint != run.corpus_fp:
            raise container.ContainerError("resume checkpoint was trained on a different dataset")
        run.speaker_map = resume_from.speaker_map
        run.resume(resume_from)
    return run.run()


def extend_speakers(ckpt: Checkpoint, new_singer_id: int, seed: int):
    """Model plus speaker map with one fresh trainable row for an unseen singer."""
    if new_singer_id in ckpt.speaker_map:
        return ckpt.build_model(), dict(ckpt.speaker_map)
    new_row = ckpt.model_config.n_speakers
    config = ckpt.model_config.with_speakers(new_row + 1)
    model = TimbreModel(config, seed=seed)
    state = {
        name: torch.from_numpy(arr.copy())
        for name, arr in ckpt.model_arrays.items()
        if name != "speaker_table.weight"
    }
    missing, unexpected = model.load_state_dict(state, strict=False)
    if unexpected or [m for m in missing if m != "speaker_table.weight"]:
        raise container.ContainerError(
            f"checkpoint arrays do not fit the extended model (missing {missing}, unexpected {unexpected})"
        )
    with torch.no_grad():
        model.speaker_table.weight[:new_row] = torch.from_numpy(
            ckpt.model_arrays["speaker_table.weight"].copy()
        )
    speaker_map = dict(ckpt.speaker_map)
    speaker_map[new_singer_id] = new_row
    return model, speaker_map


def _single_singer(feature_set: FeatureSet) -> int:
    ids = feature_set.singer_ids()
    if len(ids) != 1:
        raise ValueError(f"expected a single-singer dataset, got singers {ids}")
    return ids[0]


def adapt_decoder(
    ckpt: Checkpoint,
    target_features: FeatureSet,
    cfg: TrainConfig,
    log_path=None,
    progress=None,
    from_scratch: bool = False,
) -> Checkpoint:
    """Audio-only adaptation: frozen encoders, decoders retrained on a new voice.

    The decoder is driven by the acoustic encoder alone, the loss is
    reconstruction only, and phone labels in the dataset are never read. A
    fresh speaker row is trained for the target singer. Decoders warm-start
    from the checkpoint unless ``from_scratch`` reinitializes them. Raises if
    the frozen encoder weights drift.
    """
    if not ckpt.model_config.acoustic_encoder:
        raise ValueError("adaptation needs a checkpoint trained with an acoustic encoder")
    check_features_compatible(ckpt, target_features)
    torch.set_num_threads(cfg.threads)
    model, speaker_map = extend_speakers(ckpt, _single_singer(target_features), cfg.seed + 9)
    if from_scratch:
        model.context_decoder.reset_parameters(cfg.seed + 33)
        model.frame_decoder.reset_parameters(cfg.seed + 34)

    frozen = {
        name: p.detach().numpy().copy()
        for name, p in model.named_parameters()
        if name.startswith(("acoustic_encoder.", "linguistic_encoder."))
    }
    for name, p in model.named_parameters():
        p.requires_grad_(not name.startswith(("acoustic_encoder.", "linguistic_encoder.")))

    run = _Run(
        model=model,
        feature_set=target_features,
        speaker_map=speaker_map,
        cfg=cfg,
        noise=cfg.noise(),
        include_phones=False,
        acoustic_only=True,
        augment_keys=[],
        logger=_Logger(log_path, progress, cfg.log_every),
        phase="adapted",
    )
    result = run.run()
    for name, p in model.named_parameters():
        p.requires_grad_(True)
        if name in frozen and not np.array_equal(frozen[name], p.detach().numpy()):
            raise RuntimeError(f"frozen encoder parameter {name} changed during adaptation")
    return result


def clone(
    ckpt: Checkpoint,
    clone_features: FeatureSet,
    cfg: TrainConfig,
    supervised: bool = False,
    log_path=None,
    progress=None,
) -> Checkpoint:
    """Few-step fine-tune on a tiny target dataset (default budget 3000 steps).

    Unsupervised cloning is decoder adaptation and never reads labels.
    Supervised cloning fine-tunes all weights with linguistic inputs and the
    full loss, as the comparison baseline.
    """
    if not supervised:
        return adapt_decoder(ckpt, clone_features, cfg, log_path=log_path, progress=progress)
    check_features_compatible(ckpt, clone_features)
    torch.set_num_threads(cfg.threads)
    model, speaker_map = extend_speakers(ckpt, _single_singer(clone_features), cfg.seed + 9)
    try:
        augment_keys = _require_augment_keys(clone_features, cfg, model.config)
    except ValueError:
        augment_keys = []
    run = _Run(
        model=model,
        feature_set=clone_features,
        speaker_map=speaker_map,
        cfg=cfg,
        noise=cfg.noise(),
        include_phones=True,
        acoustic_only=False,
        augment_keys=augment_keys,
        logger=_Logger(log_path, progress, cfg.log_every),
        phase="cloned",
    )
    return run.run()


DEFAULT_CLONE_STEPS = 3000

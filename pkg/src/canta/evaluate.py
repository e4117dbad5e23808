"""Objective evaluation: reconstruction errors, embedding agreement, a linear
phoneme probe, pitch-transposition invariance, and the four-system experiment
matrix (supervised / semi-supervised, full-data / cloning).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, asdict, replace

import numpy as np
import torch

from .corpus import FeatureSet, augment_key
from .model import ModelConfig, TimbreModel
from .train import (
    Checkpoint,
    TrainConfig,
    adapt_decoder,
    check_features_compatible,
    clone,
    train_supervised,
)


@dataclass
class MetricReport:
    system: str
    recon_teacher_forced: float | None = None
    recon_autoregressive: float | None = None
    embedding_distance: float | None = None
    probe_acc_acoustic: float | None = None
    probe_acc_linguistic: float | None = None
    probe_train_acc_acoustic: float | None = None
    probe_train_acc_linguistic: float | None = None
    transposition_ratio: float | None = None
    n_utterances: int = 0
    step: int | None = None

    def as_dict(self):
        return asdict(self)


def _model_inputs(model: TimbreModel, feature_set: FeatureSet, speaker_map: dict, item):
    if item.singer_id not in speaker_map:
        raise ValueError(
            f"singer {item.singer_id} missing from checkpoint speaker map {sorted(speaker_map)}"
        )
    mel = torch.from_numpy(item.mel.astype(np.float32)).T[None]
    phones = torch.from_numpy(item.phone_ids.astype(np.int64))[None]
    f0c = torch.from_numpy(feature_set.f0_channels(item)).T[None]
    spk = torch.tensor([speaker_map[item.singer_id]])
    return mel, phones, f0c, spk


@torch.no_grad()
def teacher_forced_error(model: TimbreModel, feature_set: FeatureSet, speaker_map: dict) -> float:
    """Mean squared mel error with noise disabled, linguistic embeddings in."""
    total, count = 0.0, 0
    for item in feature_set.items:
        mel, phones, f0c, spk = _model_inputs(model, feature_set, speaker_map, item)
        embedding = model.encode_linguistic(phones)
        control = model.build_control(f0c, spk)
        pred = model.decode_teacher_forced(embedding, control, mel)
        total += float(((mel - pred) ** 2).sum())
        count += mel.numel()
    return total / count


@torch.no_grad()
def autoregressive_error(model: TimbreModel, feature_set: FeatureSet, speaker_map: dict) -> float:
    """Mean squared mel error of true autoregressive inference from labels.

    Utterances are padded to a common length and decoded as one batch; thanks
    to causality the frames before each utterance's true end are unaffected.
    """
    items = feature_set.items
    max_t = max(item.n_frames for item in items)
    batch = len(items)
    phones = torch.zeros(batch, max_t, dtype=torch.int64)
    f0c = torch.zeros(batch, 2, max_t)
    spk = torch.zeros(batch, dtype=torch.int64)
    for i, item in enumerate(items):
        m, p, f, s = _model_inputs(model, feature_set, speaker_map, item)
        phones[i, : item.n_frames] = p[0]
        f0c[i, :, : item.n_frames] = f[0]
        spk[i] = s[0]
    pred = model.infer_autoregressive(phones, f0c, spk)
    total, count = 0.0, 0
    for i, item in enumerate(items):
        mel = torch.from_numpy(item.mel.astype(np.float32)).T
        total += float(((mel - pred[i, :, : item.n_frames]) ** 2).sum())
        count += mel.numel()
    return total / count


@torch.no_grad()
def embedding_distance(model: TimbreModel, feature_set: FeatureSet) -> float:
    """Mean per-frame L2 distance between acoustic and linguistic embeddings."""
    total, count = 0.0, 0
    for item in feature_set.items:
        mel = torch.from_numpy(item.mel.astype(np.float32)).T[None]
        phones = torch.from_numpy(item.phone_ids.astype(np.int64))[None]
        diff = model.encode_acoustic(mel) - model.encode_linguistic(phones)
        total += float(diff.norm(dim=1).sum())
        count += diff.shape[-1]
    return total / count


@torch.no_grad()
def _collect_embeddings(model: TimbreModel, feature_set: FeatureSet, which: str):
    feats, labels = [], []
    for item in feature_set.items:
        if which == "acoustic":
            mel = torch.from_numpy(item.mel.astype(np.float32)).T[None]
            emb = model.encode_acoustic(mel)
        else:
            phones = torch.from_numpy(item.phone_ids.astype(np.int64))[None]
            emb = model.encode_linguistic(phones)
        feats.append(emb[0].T)
        labels.append(torch.from_numpy(item.phone_ids.astype(np.int64)))
    return feats, labels


def _fit_probe(feats: torch.Tensor, labels: torch.Tensor, n_classes: int, seed: int = 0):
    """Multinomial logistic regression on frozen frame embeddings."""
    gen = torch.Generator().manual_seed(seed)
    if len(labels) > 20000:
        idx = torch.randperm(len(labels), generator=gen)[:20000]
        feats, labels = feats[idx], labels[idx]
    w = torch.zeros(n_classes, feats.shape[1], requires_grad=True)
    b = torch.zeros(n_classes, requires_grad=True)
    opt = torch.optim.Adam([w, b], lr=0.05)
    for _ in range(250):
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(feats @ w.T + b, labels)
        loss.backward()
        opt.step()
    return w.detach(), b.detach()


def _probe_accuracy(w, b, feats, labels) -> float:
    pred = (feats @ w.T + b).argmax(dim=1)
    return float((pred == labels).float().mean())


def phoneme_probe(
    model: TimbreModel, feature_set: FeatureSet, which: str, seed: int = 0
) -> tuple[float, float]:
    """(train-split accuracy, held-out accuracy) of a linear phone probe.

    With two or more utterances the split is by utterance (even indices fit
    the probe, odd indices test it); a single utterance is split by frame
    parity instead.
    """
    feats, labels = _collect_embeddings(model, feature_set, which)
    if len(feats) >= 2:
        fit_f = torch.cat(feats[0::2])
        fit_l = torch.cat(labels[0::2])
        test_f = torch.cat(feats[1::2])
        test_l = torch.cat(labels[1::2])
    else:
        f, l = feats[0], labels[0]
        fit_f, fit_l = f[0::2], l[0::2]
        test_f, test_l = f[1::2], l[1::2]
    n_classes = feature_set.inventory.size
    w, b = _fit_probe(fit_f, fit_l, n_classes, seed=seed)
    return _probe_accuracy(w, b, fit_f, fit_l), _probe_accuracy(w, b, test_f, test_l)


@torch.no_grad()
def transposition_invariance(model: TimbreModel, feature_set: FeatureSet) -> float | None:
    """Embedding shift under a +/-2 semitone pitch transposition, relative to
    the mean distance between per-phone embedding centroids. Values below 1
    mean transposition moves embeddings less than a phone change does.
    """
    keys = [augment_key(-2), augment_key(2)]
    if any(key not in item.aug_mels for item in feature_set.items for key in keys):
        return None
    shift_total, shift_count = 0.0, 0
    by_phone: dict = {}
    for item in feature_set.items:
        mel = torch.from_numpy(item.mel.astype(np.float32)).T[None]
        base = model.encode_acoustic(mel)[0].T
        for key in keys:
            aug = torch.from_numpy(item.aug_mels[key].astype(np.float32)).T[None]
            emb = model.encode_acoustic(aug)[0].T
            shift_total += float((emb - base).norm(dim=1).sum())
            shift_count += base.shape[0]
        for phone in np.unique(item.phone_ids):
            sel = base[torch.from_numpy(item.phone_ids == phone)]
            acc = by_phone.setdefault(int(phone), [torch.zeros(base.shape[1]), 0])
            acc[0] += sel.sum(dim=0)
            acc[1] += sel.shape[0]
    centroids = [s / n for s, n in by_phone.values() if n >= 30]
    if len(centroids) < 2:
        return None
    dists = [
        float((a - b).norm()) for a, b in itertools.combinations(centroids, 2)
    ]
    return (shift_total / shift_count) / (sum(dists) / len(dists))


def evaluate(
    ckpt: Checkpoint,
    val_features: FeatureSet,
    system: str = "model",
    probe_seed: int = 0,
) -> MetricReport:
    """All objective metrics of a checkpoint on a labelled validation set.

    Metrics run with noise disabled; the autoregressive error (the model
    feeding back its own predictions) is reported separately from the
    teacher-forced one.
    """
    if not val_features.items:
        raise ValueError("empty validation set")
    check_features_compatible(ckpt, val_features)
    torch.set_num_threads(ckpt.train_config.threads)
    model = ckpt.build_model().eval()
    report = MetricReport(system=system, n_utterances=len(val_features.items), step=ckpt.step)
    report.recon_teacher_forced = teacher_forced_error(model, val_features, ckpt.speaker_map)
    report.recon_autoregressive = autoregressive_error(model, val_features, ckpt.speaker_map)
    tr, acc = phoneme_probe(model, val_features, "linguistic", seed=probe_seed)
    report.probe_train_acc_linguistic, report.probe_acc_linguistic = tr, acc
    if ckpt.model_config.acoustic_encoder:
        report.embedding_distance = embedding_distance(model, val_features)
        tr, acc = phoneme_probe(model, val_features, "acoustic", seed=probe_seed)
        report.probe_train_acc_acoustic, report.probe_acc_acoustic = tr, acc
        report.transposition_ratio = transposition_invariance(model, val_features)
    return report


# -- experiment matrix ---------------------------------------------------------


@dataclass
class FeatureBundle:
    """Feature sets for the full protocol, sharing one analysis config."""

    multi_train: FeatureSet
    multi_val: FeatureSet
    target_train: FeatureSet
    target_val: FeatureSet
    target_clone: FeatureSet


@dataclass
class MatrixResult:
    rows: list  # MetricReport, reference first
    checkpoints: dict  # system -> Checkpoint


def run_experiment_matrix(
    bundle: FeatureBundle,
    model_config: ModelConfig,
    cfg_pretrain: TrainConfig,
    cfg_target: TrainConfig,
    cfg_clone: TrainConfig,
    progress=None,
) -> MatrixResult:
    """Train and evaluate the four systems on the held-out target singer.

    Systems: supervised (trained on target labels from scratch),
    semi-supervised (multi-singer pretraining, audio-only adaptation), and
    the two cloning variants fine-tuned on the small clone subset. The
    reference row scores the ground truth against itself.
    """

    def note(msg):
        if progress:
            progress({"stage": msg})

    rows = [MetricReport(system="reference", recon_teacher_forced=0.0, recon_autoregressive=0.0,
                         n_utterances=len(bundle.target_val.items))]
    checkpoints = {}

    note("supervised: training on target labels")
    sup_config = replace(model_config, acoustic_encoder=False)
    ckpt_sup = train_supervised(bundle.target_train, sup_config, cfg_target)
    checkpoints["supervised"] = ckpt_sup
    rows.append(evaluate(ckpt_sup, bundle.target_val, system="supervised"))

    note("semi-supervised: multi-singer pretraining")
    ckpt_a = train_supervised(bundle.multi_train, model_config, cfg_pretrain)
    checkpoints["pretrained"] = ckpt_a
    note("semi-supervised: audio-only adaptation")
    ckpt_semi = adapt_decoder(ckpt_a, bundle.target_train, cfg_target)
    checkpoints["semi_supervised"] = ckpt_semi
    rows.append(evaluate(ckpt_semi, bundle.target_val, system="semi_supervised"))

    note("supervised cloning: supervised pretraining + labelled fine-tune")
    ckpt_a_sup = train_supervised(bundle.multi_train, sup_config, cfg_pretrain)
    checkpoints["pretrained_supervised"] = ckpt_a_sup
    ckpt_sc = clone(ckpt_a_sup, bundle.target_clone, cfg_clone, supervised=True)
    checkpoints["supervised_cloning"] = ckpt_sc
    rows.append(evaluate(ckpt_sc, bundle.target_val, system="supervised_cloning"))

    note("semi-supervised cloning: audio-only fine-tune")
    ckpt_uc = clone(ckpt_a, bundle.target_clone, cfg_clone, supervised=False)
    checkpoints["semi_supervised_cloning"] = ckpt_uc
    rows.append(evaluate(ckpt_uc, bundle.target_val, system="semi_supervised_cloning"))
    return MatrixResult(rows=rows, checkpoints=checkpoints)

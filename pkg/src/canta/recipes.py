"""File-level orchestration shared by the HTTP service and tests: generate
corpus assets, run training phases against feature containers on disk, and
drive inference and evaluation. Every run writes a resolved-config snapshot
next to its outputs.
"""

from __future__ import annotations

import json
import os
from dataclasses import replace

from . import corpus as corpus_mod
from . import synthesis
from .config import Resolved, write_snapshot
from .dsp import corpus_f0_stats, load_wav, compute_mel, save_wav
from .evaluate import FeatureBundle, evaluate, run_experiment_matrix
from .plotting import plot_mel_container
from .train import (
    DEFAULT_CLONE_STEPS,
    Checkpoint,
    adapt_decoder,
    clone,
    dataset_fingerprint,
    load_checkpoint,
    save_checkpoint,
    train_supervised,
)

CORPUS_SUBSETS = ("multi_train", "multi_val", "target_train", "target_val", "target_clone")


def _snapshot_next_to(resolved: Resolved, out_path):
    write_snapshot(resolved, str(out_path) + ".config.json")


def generate_corpus(resolved: Resolved, out_dir, export_wav: bool = False) -> dict:
    """Synthesize the corpus and write one feature container per subset.

    The multi-singer training subset carries the training pitch-shift
    variants; validation subsets carry the +/-2 semitone variants used by the
    transposition-invariance metric. Target-validation utterances are also
    exported as phone-timing and F0 text files (ready for the synth verb),
    and ``export_wav`` additionally writes every utterance as a WAV for
    inspection. Returns the manifest (also written to ``corpus.json``).
    """
    os.makedirs(out_dir, exist_ok=True)
    cc = resolved.corpus
    built = corpus_mod.build_corpus(
        n_singers=cc.n_singers,
        songs_per_singer=cc.songs_per_singer,
        val_songs=cc.val_songs,
        seed=cc.seed,
        config=resolved.features,
        song_seconds=tuple(cc.song_seconds),
        target_songs=cc.target_songs,
        clone_seconds=cc.clone_seconds,
    )
    subsets = {
        "multi_train": (built.train_multi, cc.train_augment_semitones),
        "multi_val": (built.val_multi, cc.val_augment_semitones),
        "target_train": (built.target_train, ()),
        "target_val": (built.target_val, cc.val_augment_semitones),
        "target_clone": (built.target_clone, cc.train_augment_semitones),
    }
    manifest = {
        "kind": "corpus",
        "seed": cc.seed,
        "feature_fingerprint": resolved.features.fingerprint(),
        "subsets": {},
    }
    for name, (utts, semitones) in subsets.items():
        fs = corpus_mod.extract_features(
            utts, built.f0_stats, built.inventory, resolved.features, augment_semitones=semitones
        )
        path = os.path.join(out_dir, f"{name}.features")
        corpus_mod.save_features(fs, path)
        entry = {
            "path": path,
            "n_utterances": len(utts),
            "singers": sorted({u.singer_id for u in utts}),
            "duration_s": round(sum(u.duration_s for u in utts), 3),
            "fingerprint": dataset_fingerprint(fs),
        }
        if export_wav:
            wav_dir = os.path.join(out_dir, "wav", name)
            os.makedirs(wav_dir, exist_ok=True)
            for i, utt in enumerate(utts):
                save_wav(os.path.join(wav_dir, f"utt{i:04d}_singer{utt.singer_id}.wav"), utt.audio)
            entry["wav_dir"] = wav_dir
        manifest["subsets"][name] = entry

    script_dir = os.path.join(out_dir, "scripts")
    os.makedirs(script_dir, exist_ok=True)
    hop_s = resolved.features.hop_ms / 1000.0
    scripts = []
    for i, utt in enumerate(built.target_val):
        base = os.path.join(script_dir, f"target_val_{i:04d}")
        _export_utterance_scripts(utt, built.inventory, hop_s, base)
        scripts.append({"phones": base + ".lab", "f0": base + ".f0", "singer": utt.singer_id})
    manifest["scripts"] = scripts

    manifest_path = os.path.join(out_dir, "corpus.json")
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
    write_snapshot(resolved, os.path.join(out_dir, "resolved_config.json"))
    manifest["manifest_path"] = manifest_path
    return manifest


def _export_utterance_scripts(utt, inventory, hop_s: float, base_path: str):
    """Write an utterance's labels as phone-timing and F0 text files."""
    ids = utt.phone_ids
    with open(base_path + ".lab", "w") as f:
        start = 0
        for t in range(1, len(ids) + 1):
            if t == len(ids) or ids[t] != ids[start]:
                end_s = t * hop_s if t < len(ids) else (len(ids) - 1) * hop_s
                f.write(f"{inventory.symbols[ids[start]]} {start * hop_s:.4f} {end_s:.4f}\n")
                start = t
    with open(base_path + ".f0", "w") as f:
        for t, hz in enumerate(utt.f0.f0_hz):
            f.write(f"{t * hop_s:.4f} {hz:.4f}\n")


def load_bundle(corpus_dir, resolved: Resolved) -> FeatureBundle:
    manifest_path = os.path.join(corpus_dir, "corpus.json")
    with open(manifest_path) as f:
        manifest = json.load(f)
    sets = {}
    for name in CORPUS_SUBSETS:
        sets[name] = corpus_mod.load_features(
            manifest["subsets"][name]["path"], expected_config=resolved.features
        )
    return FeatureBundle(**sets)


def extract_real_features(items, out_path, resolved: Resolved, stats_from=None) -> dict:
    """Build a feature container from (wav, phone file, f0 file, singer) items.

    ``stats_from`` names a checkpoint whose F0 normalization stats should be
    reused (required when the features will drive a trained model); without
    it the stats come from the given F0 files themselves.
    """
    inventory = corpus_mod.PhoneInventory()
    cfg = resolved.features
    hop_s = cfg.hop_ms / 1000.0
    utterances = []
    for item in items:
        clip = load_wav(item["wav"])
        mel = compute_mel(clip, cfg)
        segments = synthesis.parse_phone_file(item["phones"], inventory)
        phone_ids = synthesis.phones_to_frames(
            segments, mel.n_frames, hop_s, inventory.index("sil")
        )
        times, values = synthesis.parse_f0_file(item["f0"])
        track = synthesis.f0_to_frames(times, values, mel.n_frames, hop_s)
        utterances.append(
            corpus_mod.Utterance(
                audio=clip,
                mel=mel,
                phone_ids=phone_ids,
                f0=track,
                singer_id=int(item["singer_id"]),
            )
        )
    if stats_from:
        stats = load_checkpoint(stats_from).f0_stats
    else:
        stats = corpus_f0_stats([u.f0 for u in utterances])
    fs = corpus_mod.extract_features(utterances, stats, inventory, cfg)
    corpus_mod.save_features(fs, out_path)
    _snapshot_next_to(resolved, out_path)
    return {
        "path": str(out_path),
        "n_utterances": len(utterances),
        "fingerprint": dataset_fingerprint(fs),
    }


def _load_features_for(ckpt: Checkpoint | None, path, resolved: Resolved):
    expected = ckpt.feature_config if ckpt is not None else resolved.features
    return corpus_mod.load_features(path, expected_config=expected)


def run_train(features_path, out_ckpt, resolved: Resolved, resume_from=None, progress=None) -> dict:
    fs = corpus_mod.load_features(features_path, expected_config=resolved.features)
    resume = load_checkpoint(resume_from) if resume_from else None
    ckpt = train_supervised(
        fs,
        resolved.model,
        resolved.train,
        log_path=str(out_ckpt) + ".log.jsonl",
        progress=progress,
        resume_from=resume,
    )
    save_checkpoint(ckpt, out_ckpt)
    _snapshot_next_to(resolved, out_ckpt)
    return _ckpt_summary(ckpt, out_ckpt)


def run_adapt(
    ckpt_path, features_path, out_ckpt, resolved: Resolved, from_scratch=False, progress=None
) -> dict:
    base = load_checkpoint(ckpt_path)
    fs = _load_features_for(base, features_path, resolved)
    ckpt = adapt_decoder(
        base,
        fs,
        resolved.train,
        log_path=str(out_ckpt) + ".log.jsonl",
        progress=progress,
        from_scratch=from_scratch,
    )
    save_checkpoint(ckpt, out_ckpt)
    _snapshot_next_to(resolved, out_ckpt)
    return _ckpt_summary(ckpt, out_ckpt)


def run_clone(
    ckpt_path, features_path, out_ckpt, resolved: Resolved, supervised=False, progress=None
) -> dict:
    base = load_checkpoint(ckpt_path)
    fs = _load_features_for(base, features_path, resolved)
    ckpt = clone(
        base,
        fs,
        resolved.train,
        supervised=supervised,
        log_path=str(out_ckpt) + ".log.jsonl",
        progress=progress,
    )
    save_checkpoint(ckpt, out_ckpt)
    _snapshot_next_to(resolved, out_ckpt)
    return _ckpt_summary(ckpt, out_ckpt)


def run_eval(ckpt_path, features_path, system="model", out_path=None) -> dict:
    ckpt = load_checkpoint(ckpt_path)
    fs = corpus_mod.load_features(features_path, expected_config=ckpt.feature_config)
    report = evaluate(ckpt, fs, system=system).as_dict()
    if out_path:
        with open(out_path, "a") as f:
            f.write(json.dumps(report) + "\n")
    return report


def run_matrix(
    corpus_dir,
    out_dir,
    resolved: Resolved,
    pretrain_steps=None,
    target_steps=None,
    clone_steps=None,
    progress=None,
) -> dict:
    """Full four-system comparison from a generated corpus directory."""
    os.makedirs(out_dir, exist_ok=True)
    bundle = load_bundle(corpus_dir, resolved)
    base = resolved.train
    cfg_pre = replace(base, max_steps=pretrain_steps or base.max_steps)
    cfg_tgt = replace(base, max_steps=target_steps or base.max_steps)
    cfg_cln = replace(base, max_steps=clone_steps or DEFAULT_CLONE_STEPS)
    result = run_experiment_matrix(
        bundle, resolved.model, cfg_pre, cfg_tgt, cfg_cln, progress=progress
    )
    paths = {}
    for name, ckpt in result.checkpoints.items():
        path = os.path.join(out_dir, f"{name}.ckpt")
        save_checkpoint(ckpt, path)
        paths[name] = path
    rows = [r.as_dict() for r in result.rows]
    report_path = os.path.join(out_dir, "matrix_report.json")
    with open(report_path, "w") as f:
        json.dump({"rows": rows, "checkpoints": paths}, f, indent=2)
    with open(os.path.join(out_dir, "matrix_report.jsonl"), "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    write_snapshot(resolved, os.path.join(out_dir, "resolved_config.json"))
    return {"rows": rows, "checkpoints": paths, "report_path": report_path}


def run_synth(ckpt_path, phone_file, f0_file, speaker, out_mel, out_wav=None) -> dict:
    ckpt = load_checkpoint(ckpt_path)
    mel = synthesis.synthesize_from_files(ckpt, phone_file, f0_file, speaker, out_mel, out_wav)
    return {
        "mel_path": str(out_mel),
        "wav_path": str(out_wav) if out_wav else None,
        "n_frames": int(mel.shape[0]),
        "n_bands": int(mel.shape[1]),
    }


def run_convert(ckpt_path, source_wav, f0_file, speaker, out_mel) -> dict:
    ckpt = load_checkpoint(ckpt_path)
    mel = synthesis.convert_from_files(ckpt, source_wav, f0_file, speaker, out_mel)
    return {"mel_path": str(out_mel), "n_frames": int(mel.shape[0]), "n_bands": int(mel.shape[1])}


def run_plot(mel_path, out_png, title=None) -> dict:
    plot_mel_container(mel_path, out_png, title=title)
    return {"png_path": str(out_png)}


def _ckpt_summary(ckpt: Checkpoint, path) -> dict:
    return {
        "checkpoint_path": str(path),
        "step": ckpt.step,
        "phase": ckpt.phase,
        "model_fingerprint": ckpt.model_config.fingerprint(),
        "speakers": {str(k): v for k, v in ckpt.speaker_map.items()},
        "log_path": str(path) + ".log.jsonl",
    }

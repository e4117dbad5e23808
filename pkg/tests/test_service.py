import json
import os

import numpy as np
import pytest
from fastapi.testclient import TestClient

from canta import corpus, train
from canta.dsp import save_wav
from canta.service import create_app

TINY_CORPUS_OVERRIDES = {
    "corpus.n_singers": 3,
    "corpus.songs_per_singer": 2,
    "corpus.target_songs": 3,
    "corpus.song_seconds": [4.0, 5.0],
    "corpus.clone_seconds": 6.0,
    "corpus.train_augment_semitones": [-2, 2],
    "corpus.seed": 4,
}

TINY_TRAIN_OVERRIDES = {
    "train.max_steps": 3,
    "train.batch_size": 2,
    "train.valid_frames": 60,
    "train.augment_semitones": [-2, 2],
    "model.embedding_dim": 8,
    "model.speaker_dim": 4,
    "model.encoder_channels": 5,
    "model.context_channels": 5,
    "model.frame_channels": 8,
}


@pytest.fixture(scope="module")
def app():
    return create_app()


@pytest.fixture(scope="module")
def client(app):
    return TestClient(app)


@pytest.fixture(scope="module")
def corpus_dir(client, tmp_path_factory):
    out = tmp_path_factory.mktemp("svc_corpus")
    r = client.post(
        "/corpus/generate",
        json={"out_dir": str(out), "overrides": TINY_CORPUS_OVERRIDES},
    )
    assert r.status_code == 200, r.text
    return out, r.json()


def wait_job(app, client, response, timeout=600):
    assert response.status_code == 200, response.text
    job_id = response.json()["job_id"]
    status = app.state.jobs.wait(job_id, timeout=timeout)
    assert status["state"] == "done", status
    r = client.get(f"/jobs/{job_id}")
    assert r.status_code == 200
    return r.json()


@pytest.fixture(scope="module")
def trained(app, client, corpus_dir, tmp_path_factory):
    out_dir, manifest = corpus_dir
    ckpt = tmp_path_factory.mktemp("svc_ckpt") / "a.ckpt"
    r = client.post(
        "/train",
        json={
            "features_path": manifest["subsets"]["multi_train"]["path"],
            "out_checkpoint": str(ckpt),
            "overrides": TINY_TRAIN_OVERRIDES,
        },
    )
    status = wait_job(app, client, r)
    return ckpt, manifest, status


class TestBasics:
    def test_health(self, client):
        body = client.get("/health").json()
        assert body["status"] == "ok"

    def test_defaults_snapshot(self, client):
        body = client.get("/defaults").json()
        assert body["features"]["n_bands"] == 100
        assert body["train"]["base_lr"] == 5e-4
        assert body["model"]["frame_channels"] == 200

    def test_unknown_job_404(self, client):
        assert client.get("/jobs/doesnotexist").status_code == 404

    def test_config_errors_are_400(self, client, tmp_path):
        r = client.post(
            "/corpus/generate",
            json={"out_dir": str(tmp_path), "overrides": {"corpus.bogus_key": 1}},
        )
        assert r.status_code == 400
        assert "bogus_key" in r.json()["detail"]


class TestCorpusGeneration:
    def test_manifest_and_files(self, corpus_dir):
        out, manifest = corpus_dir
        assert set(manifest["subsets"]) == {
            "multi_train", "multi_val", "target_train", "target_val", "target_clone",
        }
        for name, entry in manifest["subsets"].items():
            assert os.path.exists(entry["path"]), name
        assert os.path.exists(out / "corpus.json")
        assert os.path.exists(out / "resolved_config.json")

    def test_containers_load_and_align(self, corpus_dir):
        _, manifest = corpus_dir
        fs = corpus.load_features(manifest["subsets"]["multi_train"]["path"])
        assert len(fs.items) == manifest["subsets"]["multi_train"]["n_utterances"]
        for item in fs.items:
            assert item.mel.shape[0] == len(item.phone_ids) == len(item.f0_hz)
            assert set(item.aug_mels) == {"shift-2", "shift+2"}

    def test_resolved_snapshot_records_overrides(self, corpus_dir):
        out, _ = corpus_dir
        snap = json.loads((out / "resolved_config.json").read_text())
        assert snap["corpus"]["n_singers"] == 3
        assert snap["corpus"]["seed"] == 4

    def test_target_val_scripts_exported(self, corpus_dir):
        _, manifest = corpus_dir
        assert manifest["scripts"]
        for entry in manifest["scripts"]:
            assert os.path.exists(entry["phones"])
            assert os.path.exists(entry["f0"])
            first = open(entry["phones"]).readline().split()
            assert len(first) == 3 and first[0] in corpus.DEFAULT_SYMBOLS

    def test_export_wav_writes_audio(self, client, tmp_path):
        r = client.post(
            "/corpus/generate",
            json={
                "out_dir": str(tmp_path),
                "export_wav": True,
                "overrides": {
                    "corpus.n_singers": 2, "corpus.songs_per_singer": 2,
                    "corpus.target_songs": 2, "corpus.song_seconds": [4.0, 4.5],
                    "corpus.clone_seconds": 4.0,
                    "corpus.train_augment_semitones": [-2, 2], "corpus.seed": 1,
                },
            },
        )
        assert r.status_code == 200, r.text
        wav_dir = r.json()["subsets"]["multi_train"]["wav_dir"]
        wavs = os.listdir(wav_dir)
        assert wavs and all(w.endswith(".wav") for w in wavs)
        from canta.dsp import load_wav

        clip = load_wav(os.path.join(wav_dir, wavs[0]))
        assert clip.sample_rate == 32000 and len(clip.samples) > 32000


class TestTrainingJobs:
    def test_train_job_completes_with_progress(self, trained):
        ckpt, _, status = trained
        assert status["state"] == "done"
        assert status["result"]["step"] == 3
        assert status["progress"]["step"] >= 1
        assert os.path.exists(ckpt)
        assert os.path.exists(str(ckpt) + ".log.jsonl")
        assert os.path.exists(str(ckpt) + ".config.json")

    def test_adapt_job(self, app, client, trained, tmp_path):
        ckpt, manifest, _ = trained
        out = tmp_path / "b.ckpt"
        r = client.post(
            "/adapt",
            json={
                "checkpoint": str(ckpt),
                "features_path": manifest["subsets"]["target_train"]["path"],
                "out_checkpoint": str(out),
                "overrides": TINY_TRAIN_OVERRIDES,
            },
        )
        status = wait_job(app, client, r)
        assert status["result"]["phase"] == "adapted"
        loaded = train.load_checkpoint(out)
        base = train.load_checkpoint(ckpt)
        for key in base.model_arrays:
            if key.startswith(("acoustic_encoder.", "linguistic_encoder.")):
                assert np.array_equal(loaded.model_arrays[key], base.model_arrays[key])

    def test_clone_job_supervised(self, app, client, trained, tmp_path):
        ckpt, manifest, _ = trained
        out = tmp_path / "c.ckpt"
        r = client.post(
            "/clone",
            json={
                "checkpoint": str(ckpt),
                "features_path": manifest["subsets"]["target_clone"]["path"],
                "out_checkpoint": str(out),
                "supervised": True,
                "overrides": TINY_TRAIN_OVERRIDES,
            },
        )
        status = wait_job(app, client, r)
        assert status["result"]["phase"] == "cloned"

    def test_matrix_job(self, app, client, corpus_dir, tmp_path):
        out_dir, _ = corpus_dir
        result_dir = tmp_path / "matrix"
        r = client.post(
            "/experiments/matrix",
            json={
                "corpus_dir": str(out_dir),
                "out_dir": str(result_dir),
                "pretrain_steps": 2,
                "target_steps": 2,
                "clone_steps": 2,
                "overrides": TINY_TRAIN_OVERRIDES,
            },
        )
        status = wait_job(app, client, r)
        rows = status["result"]["rows"]
        assert [row["system"] for row in rows] == [
            "reference", "supervised", "semi_supervised",
            "supervised_cloning", "semi_supervised_cloning",
        ]
        assert os.path.exists(result_dir / "matrix_report.json")
        lines = (result_dir / "matrix_report.jsonl").read_text().strip().splitlines()
        assert len(lines) == 5 and json.loads(lines[0])["system"] == "reference"
        for name in status["result"]["checkpoints"].values():
            assert os.path.exists(name)

    def test_matrix_missing_corpus_component_fails(self, app, client, tmp_path):
        bare = tmp_path / "bare_corpus"
        bare.mkdir()
        (bare / "corpus.json").write_text(json.dumps({"subsets": {}}))
        r = client.post(
            "/experiments/matrix",
            json={"corpus_dir": str(bare), "out_dir": str(tmp_path / "out")},
        )
        status = app.state.jobs.wait(r.json()["job_id"], timeout=60)
        assert status["state"] == "error"
        assert "multi_train" in status["error"]

    def test_job_error_surfaces(self, app, client, tmp_path):
        r = client.post(
            "/train",
            json={"features_path": "/missing.features", "out_checkpoint": str(tmp_path / "x.ckpt")},
        )
        job_id = r.json()["job_id"]
        status = app.state.jobs.wait(job_id, timeout=60)
        assert status["state"] == "error"
        assert "missing.features" in status["error"]

    def test_jobs_listing(self, client, trained):
        body = client.get("/jobs").json()
        assert len(body) >= 1
        assert {"job_id", "kind", "state"} <= set(body[0])


class TestInferenceEndpoints:
    def test_evaluate(self, client, trained):
        ckpt, manifest, _ = trained
        r = client.post(
            "/evaluate",
            json={
                "checkpoint": str(ckpt),
                "features_path": manifest["subsets"]["multi_val"]["path"],
                "system": "svc-test",
            },
        )
        assert r.status_code == 200, r.text
        body = r.json()
        assert body["system"] == "svc-test"
        assert body["recon_autoregressive"] >= 0

    def test_synthesize_and_plot(self, client, trained, tmp_path):
        ckpt, _, _ = trained
        phones = tmp_path / "p.lab"
        phones.write_text("sil 0.0 0.2\na 0.2 0.8\nsil 0.8 1.0\n")
        f0 = tmp_path / "x.f0"
        f0.write_text("".join(
            f"{i * 0.005:.4f} {200.0 if 0.2 <= i * 0.005 <= 0.8 else 0.0}\n" for i in range(201)
        ))
        r = client.post(
            "/synthesize",
            json={
                "checkpoint": str(ckpt),
                "phone_file": str(phones),
                "f0_file": str(f0),
                "speaker": 0,
                "out_mel": str(tmp_path / "o.mel"),
                "out_wav": str(tmp_path / "o.wav"),
            },
        )
        assert r.status_code == 200, r.text
        body = r.json()
        assert body["n_frames"] == 201 and body["n_bands"] == 100
        assert os.path.exists(body["wav_path"])
        r = client.post(
            "/plot", json={"mel_path": str(tmp_path / "o.mel"), "out_png": str(tmp_path / "o.png")}
        )
        assert r.status_code == 200 and os.path.exists(r.json()["png_path"])

    def test_convert(self, client, trained, tiny_corpus, tmp_path):
        ckpt, _, _ = trained
        # singer 0 belongs to the service corpus; reuse its id with fresh audio
        utt = tiny_corpus.val_multi[0]
        wav = tmp_path / "src.wav"
        save_wav(wav, utt.audio)
        f0 = tmp_path / "src.f0"
        f0.write_text("".join(
            f"{i * 0.005:.4f} {hz:.3f}\n" for i, hz in enumerate(utt.f0.f0_hz)
        ))
        r = client.post(
            "/convert",
            json={
                "checkpoint": str(ckpt),
                "source_wav": str(wav),
                "f0_file": str(f0),
                "speaker": 0,
                "out_mel": str(tmp_path / "c.mel"),
            },
        )
        assert r.status_code == 200, r.text
        assert r.json()["n_frames"] == utt.n_frames

    def test_bad_checkpoint_is_400(self, client, tmp_path):
        r = client.post(
            "/evaluate",
            json={"checkpoint": "/missing.ckpt", "features_path": "/missing.features"},
        )
        assert r.status_code == 400


class TestFeaturesEndpoint:
    def test_extract_from_real_files(self, client, trained, tiny_corpus, tmp_path):
        ckpt, _, _ = trained
        utt = tiny_corpus.target_val[0]
        wav = tmp_path / "u.wav"
        save_wav(wav, utt.audio)
        inv = tiny_corpus.inventory
        # reconstruct a phone timing file from the frame labels
        phones = tmp_path / "u.lab"
        lines, start = [], 0
        ids = utt.phone_ids
        for t in range(1, len(ids) + 1):
            if t == len(ids) or ids[t] != ids[start]:
                end_t = t * 0.005 if t < len(ids) else (len(ids) - 1) * 0.005
                lines.append(f"{inv.symbols[ids[start]]} {start * 0.005:.4f} {end_t:.4f}")
                start = t
        phones.write_text("\n".join(lines) + "\n")
        f0 = tmp_path / "u.f0"
        f0.write_text("".join(f"{i * 0.005:.4f} {hz:.3f}\n" for i, hz in enumerate(utt.f0.f0_hz)))
        r = client.post(
            "/features/extract",
            json={
                "items": [
                    {"wav": str(wav), "phones": str(phones), "f0": str(f0), "singer_id": 99}
                ],
                "out_path": str(tmp_path / "real.features"),
                "stats_from": str(ckpt),
            },
        )
        assert r.status_code == 200, r.text
        fs = corpus.load_features(tmp_path / "real.features")
        assert fs.items[0].singer_id == 99
        assert fs.items[0].n_frames == utt.n_frames
        # labels reconstructed from the timing file match the originals
        mismatch = np.mean(fs.items[0].phone_ids != utt.phone_ids)
        assert mismatch < 0.02
        stats = train.load_checkpoint(ckpt).f0_stats
        assert fs.f0_stats == stats

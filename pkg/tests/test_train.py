import math

import numpy as np
import pytest
import torch

from canta import container, corpus, train
from canta.model import ModelConfig


def tiny_model_config(inventory_size=12, **kw):
    base = dict(
        inventory_size=inventory_size,
        embedding_dim=10,
        speaker_dim=4,
        encoder_channels=6,
        context_channels=6,
        frame_channels=10,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_train_config(**kw):
    base = dict(
        max_steps=6, batch_size=2, valid_frames=80, seed=3,
        augment_semitones=(-2, 2), log_every=1,
    )
    base.update(kw)
    return train.TrainConfig(**base)


class TestLrSchedule:
    def setup_method(self):
        self.cfg = train.TrainConfig()

    def test_warmup_endpoint_is_base_rate(self):
        assert train.lr_schedule(700, self.cfg) == pytest.approx(5e-4, abs=1e-12)

    def test_half_warmup_is_half_rate(self):
        assert train.lr_schedule(350, self.cfg) == pytest.approx(2.5e-4, abs=1e-12)

    def test_one_decay_period_past_warmup(self):
        assert train.lr_schedule(10700, self.cfg) == pytest.approx(7.5e-5, abs=1e-12)

    def test_continuous_at_warmup(self):
        eps_before = train.lr_schedule(699, self.cfg)
        at = train.lr_schedule(700, self.cfg)
        just_after = train.lr_schedule(701, self.cfg)
        assert abs(at - eps_before) < 1e-6
        assert abs(at - just_after) < 1e-6

    def test_monotone_non_increasing_after_warmup(self):
        values = [train.lr_schedule(s, self.cfg) for s in range(700, 30000, 37)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_zero_at_step_zero_and_negative_rejected(self):
        assert train.lr_schedule(0, self.cfg) == 0.0
        with pytest.raises(ValueError):
            train.lr_schedule(-1, self.cfg)

    def test_decay_exponent_is_continuous_not_stepped(self):
        mid = train.lr_schedule(700 + 5000, self.cfg)
        expected = 5e-4 * 0.15 ** 0.5
        assert mid == pytest.approx(expected, rel=1e-12)


class TestAdamParity:
    def test_torch_adam_matches_scalar_reference(self):
        """One-parameter quadratic, 100 steps: torch Adam vs a from-scratch
        scalar implementation of the standard update formulas."""
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        p = torch.tensor([0.7], dtype=torch.float64, requires_grad=True)
        opt = torch.optim.Adam([p], lr=lr, betas=(b1, b2), eps=eps)

        theta = 0.7
        m = v = 0.0
        for t in range(1, 101):
            opt.zero_grad()
            loss = (p ** 2).sum()
            loss.backward()
            opt.step()

            g = 2.0 * theta
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
            assert abs(p.item() - theta) < 1e-12, f"diverged at step {t}"


@pytest.fixture(scope="module")
def train_sets(tiny_features):
    return tiny_features


class TestTrainSupervised:
    def test_loss_history_and_determinism(self, train_sets):
        records_a, records_b = [], []
        cfg = tiny_train_config()
        ck_a = train.train_supervised(
            train_sets["multi_train"], tiny_model_config(), cfg, progress=records_a.append
        )
        ck_b = train.train_supervised(
            train_sets["multi_train"], tiny_model_config(), cfg, progress=records_b.append
        )
        assert [r["loss"] for r in records_a] == [r["loss"] for r in records_b]
        for key in ck_a.model_arrays:
            assert np.array_equal(ck_a.model_arrays[key], ck_b.model_arrays[key])

    def test_speaker_map_covers_training_singers(self, train_sets):
        ck = train.train_supervised(
            train_sets["multi_train"], tiny_model_config(), tiny_train_config()
        )
        assert sorted(ck.speaker_map) == train_sets["multi_train"].singer_ids()
        assert ck.model_config.n_speakers == len(ck.speaker_map)

    def test_missing_augmentation_variant_rejected(self, train_sets):
        cfg = tiny_train_config(augment_semitones=(-7,))
        with pytest.raises(ValueError, match="pitch-shift variant"):
            train.train_supervised(train_sets["multi_train"], tiny_model_config(), cfg)

    def test_divergence_guard_aborts_with_checkpoint(self, train_sets):
        fs = train_sets["multi_train"]
        poisoned = corpus.FeatureSet(
            items=[
                corpus.FeatureItem(
                    mel=np.full_like(fs.items[0].mel, np.nan),
                    phone_ids=fs.items[0].phone_ids,
                    f0_hz=fs.items[0].f0_hz,
                    voiced=fs.items[0].voiced,
                    singer_id=fs.items[0].singer_id,
                    aug_mels=dict(fs.items[0].aug_mels),
                )
            ],
            inventory=fs.inventory,
            feature_config=fs.feature_config,
            f0_stats=fs.f0_stats,
        )
        with pytest.raises(train.TrainingDiverged) as err:
            train.train_supervised(
                poisoned, tiny_model_config(), tiny_train_config(augment=False)
            )
        assert err.value.step == 1
        assert isinstance(err.value.checkpoint, train.Checkpoint)

    def test_log_file_is_line_delimited_json(self, train_sets, tmp_path):
        import json

        log = tmp_path / "train.log.jsonl"
        train.train_supervised(
            train_sets["multi_train"], tiny_model_config(),
            tiny_train_config(max_steps=3), log_path=log,
        )
        lines = log.read_text().strip().splitlines()
        assert len(lines) == 3
        rec = json.loads(lines[-1])
        assert {"step", "lr", "loss", "recon", "embed", "wall_time"} <= set(rec)


@pytest.fixture(scope="module")
def ckpt(tiny_features):
    return train.train_supervised(
        tiny_features["multi_train"], tiny_model_config(), tiny_train_config()
    )


@pytest.fixture(scope="module")
def phase_a(tiny_features):
    return train.train_supervised(
        tiny_features["multi_train"], tiny_model_config(), tiny_train_config()
    )


class TestCheckpointIO:
    def test_round_trip_bit_exact(self, ckpt, tmp_path):
        path = tmp_path / "a.ckpt"
        train.save_checkpoint(ckpt, path)
        back = train.load_checkpoint(path)
        assert back.step == ckpt.step
        assert back.model_config == ckpt.model_config
        assert back.train_config == ckpt.train_config
        assert back.speaker_map == ckpt.speaker_map
        assert set(back.model_arrays) == set(ckpt.model_arrays)
        for key in ckpt.model_arrays:
            assert np.array_equal(back.model_arrays[key], ckpt.model_arrays[key])
            assert back.model_arrays[key].dtype == ckpt.model_arrays[key].dtype
        for key in ckpt.adam_arrays:
            for field in ("exp_avg", "exp_avg_sq", "step"):
                assert np.array_equal(back.adam_arrays[key][field], ckpt.adam_arrays[key][field])
        assert np.array_equal(back.torch_rng, ckpt.torch_rng)
        assert back.data_rng_state == ckpt.data_rng_state

    def test_architecture_fingerprint_guard(self, ckpt, tmp_path):
        path = tmp_path / "b.ckpt"
        train.save_checkpoint(ckpt, path)
        other = tiny_model_config(frame_channels=14).fingerprint()
        with pytest.raises(container.ContainerError, match="fingerprint"):
            train.load_checkpoint(path, expect_model_fingerprint=other)

    def test_wrong_kind_rejected(self, tmp_path, tiny_features):
        path = tmp_path / "notckpt.bin"
        corpus.save_features(tiny_features["multi_val"], path)
        with pytest.raises(container.ContainerError, match="not a checkpoint"):
            train.load_checkpoint(path)

    def test_resume_matches_uninterrupted_trajectory(self, train_sets, tmp_path):
        fs = train_sets["multi_train"]
        mc = tiny_model_config()
        full_records = []
        full = train.train_supervised(
            fs, mc, tiny_train_config(max_steps=50), progress=full_records.append
        )
        half = train.train_supervised(fs, mc, tiny_train_config(max_steps=25))
        path = tmp_path / "half.ckpt"
        train.save_checkpoint(half, path)
        resumed_records = []
        resumed = train.train_supervised(
            fs, mc, tiny_train_config(max_steps=50),
            resume_from=train.load_checkpoint(path), progress=resumed_records.append,
        )
        tail = [r["loss"] for r in full_records if r["step"] > 25]
        assert [r["loss"] for r in resumed_records] == tail
        for key in full.model_arrays:
            assert np.array_equal(full.model_arrays[key], resumed.model_arrays[key])

    def test_resume_rejects_other_dataset(self, train_sets, tmp_path, ckpt):
        with pytest.raises(container.ContainerError, match="different dataset"):
            train.train_supervised(
                train_sets["multi_val"], tiny_model_config(),
                tiny_train_config(), resume_from=ckpt,
            )


class TestAdaptDecoder:
    def test_encoders_bit_identical_after_adaptation(self, phase_a, train_sets):
        adapted = train.adapt_decoder(
            phase_a, train_sets["target_train"], tiny_train_config(max_steps=4)
        )
        for key in phase_a.model_arrays:
            if key.startswith(("acoustic_encoder.", "linguistic_encoder.")):
                assert np.array_equal(adapted.model_arrays[key], phase_a.model_arrays[key]), key
            elif key.startswith(("context_decoder.", "frame_decoder.")):
                assert not np.array_equal(adapted.model_arrays[key], phase_a.model_arrays[key]), key

    def test_fresh_speaker_row_created_and_old_rows_untouched(self, phase_a, train_sets):
        adapted = train.adapt_decoder(
            phase_a, train_sets["target_train"], tiny_train_config(max_steps=4)
        )
        target_id = train_sets["target_train"].singer_ids()[0]
        assert target_id in adapted.speaker_map
        assert adapted.model_config.n_speakers == phase_a.model_config.n_speakers + 1
        old = phase_a.model_arrays["speaker_table.weight"]
        new = adapted.model_arrays["speaker_table.weight"]
        assert np.array_equal(new[: len(old)], old)

    def test_decoder_loss_decreases(self, phase_a, train_sets):
        records = []
        train.adapt_decoder(
            phase_a, train_sets["target_train"],
            tiny_train_config(max_steps=150, seed=1, warmup_steps=5, valid_frames=60),
            progress=records.append,
        )
        first = np.mean([r["recon"] for r in records[:10]])
        last = np.mean([r["recon"] for r in records[-10:]])
        assert last < 0.75 * first

    def test_labels_never_read(self, phase_a, train_sets):
        fs = train_sets["target_train"]

        class Spy:
            def __init__(self, item):
                object.__setattr__(self, "_item", item)
                object.__setattr__(self, "reads", [])

            def __getattr__(self, name):
                if name == "phone_ids":
                    self.reads.append(name)
                return getattr(self._item, name)

        spies = [Spy(i) for i in fs.items]
        spied = corpus.FeatureSet(
            items=spies, inventory=fs.inventory,
            feature_config=fs.feature_config, f0_stats=fs.f0_stats,
        )
        train.clone(phase_a, spied, tiny_train_config(max_steps=2), supervised=False)
        assert all(not s.reads for s in spies)

    def test_supervised_clone_reads_labels_and_trains_encoders(self, phase_a, train_sets):
        cloned = train.clone(
            phase_a, train_sets["target_clone"], tiny_train_config(max_steps=4), supervised=True
        )
        changed = [
            key
            for key in phase_a.model_arrays
            if key.startswith("linguistic_encoder.")
            and not np.array_equal(cloned.model_arrays[key], phase_a.model_arrays[key])
        ]
        assert changed, "supervised cloning should update the encoders"

    def test_from_scratch_reinitializes_decoders(self, phase_a, train_sets):
        warm = train.adapt_decoder(
            phase_a, train_sets["target_train"], tiny_train_config(max_steps=2)
        )
        cold = train.adapt_decoder(
            phase_a, train_sets["target_train"], tiny_train_config(max_steps=2), from_scratch=True
        )
        key = next(k for k in warm.model_arrays if k.startswith("frame_decoder."))
        assert not np.array_equal(warm.model_arrays[key], cold.model_arrays[key])
        for k in phase_a.model_arrays:
            if k.startswith("acoustic_encoder."):
                assert np.array_equal(cold.model_arrays[k], phase_a.model_arrays[k])

    def test_needs_acoustic_encoder(self, train_sets):
        sup = train.train_supervised(
            train_sets["multi_train"],
            tiny_model_config(acoustic_encoder=False),
            tiny_train_config(augment=False),
        )
        with pytest.raises(ValueError, match="acoustic encoder"):
            train.adapt_decoder(sup, train_sets["target_train"], tiny_train_config())

    def test_multi_singer_target_rejected(self, phase_a, train_sets):
        with pytest.raises(ValueError, match="single-singer"):
            train.adapt_decoder(phase_a, train_sets["multi_train"], tiny_train_config())

    def test_incompatible_features_rejected(self, phase_a, tiny_corpus):
        other_stats = corpus.CorpusStats(log_f0_min=1.0, log_f0_max=2.0)
        fs = corpus.extract_features(
            tiny_corpus.target_train, other_stats, tiny_corpus.inventory, tiny_corpus.feature_config
        )
        with pytest.raises(container.ContainerError, match="F0 normalization"):
            train.adapt_decoder(phase_a, fs, tiny_train_config())


class TestDatasetFingerprint:
    def test_label_blind_mode_ignores_phones(self, tiny_features):
        fs = tiny_features["target_train"]
        relabelled = corpus.FeatureSet(
            items=[
                corpus.FeatureItem(
                    mel=i.mel, phone_ids=np.zeros_like(i.phone_ids), f0_hz=i.f0_hz,
                    voiced=i.voiced, singer_id=i.singer_id, aug_mels=i.aug_mels,
                )
                for i in fs.items
            ],
            inventory=fs.inventory, feature_config=fs.feature_config, f0_stats=fs.f0_stats,
        )
        assert train.dataset_fingerprint(fs, include_labels=False) == train.dataset_fingerprint(
            relabelled, include_labels=False
        )
        assert train.dataset_fingerprint(fs) != train.dataset_fingerprint(relabelled)

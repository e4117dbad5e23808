import numpy as np
import pytest
from scipy.io import wavfile

from canta import dsp
from conftest import make_tone


class TestLoadWav:
    def test_silence(self, tmp_path):
        path = tmp_path / "sil.wav"
        wavfile.write(path, 32000, np.zeros(32000, dtype=np.int16))
        clip = dsp.load_wav(path)
        assert clip.sample_rate == 32000
        assert len(clip.samples) == 32000
        assert np.all(clip.samples == 0.0)

    def test_full_scale_square_hits_quantization_ceiling(self, tmp_path):
        path = tmp_path / "sq.wav"
        wavfile.write(path, 32000, np.full(1000, 32767, dtype=np.int16))
        clip = dsp.load_wav(path)
        assert np.all(clip.samples == 32767 / 32768)

    def test_float_wav(self, tmp_path):
        path = tmp_path / "f.wav"
        data = np.linspace(-0.5, 0.5, 100).astype(np.float32)
        wavfile.write(path, 32000, data)
        clip = dsp.load_wav(path)
        assert np.allclose(clip.samples, data, atol=1e-7)

    def test_stereo_rejected(self, tmp_path):
        path = tmp_path / "st.wav"
        wavfile.write(path, 32000, np.zeros((100, 2), dtype=np.int16))
        with pytest.raises(dsp.AudioError, match="channels unsupported"):
            dsp.load_wav(path)

    def test_missing_file(self):
        with pytest.raises(FileNotFoundError):
            dsp.load_wav("/no/such/file.wav")

    def test_unsupported_encoding(self, tmp_path):
        path = tmp_path / "u8.wav"
        wavfile.write(path, 32000, np.zeros(100, dtype=np.uint8))
        with pytest.raises(dsp.AudioError, match="unsupported WAV encoding"):
            dsp.load_wav(path)

    def test_save_load_round_trip(self, tmp_path):
        clip = make_tone(220.0, 0.25)
        path = tmp_path / "rt.wav"
        dsp.save_wav(path, clip)
        back = dsp.load_wav(path)
        assert back.sample_rate == clip.sample_rate
        assert np.abs(back.samples - clip.samples).max() < 1.0 / 32768


class TestMelFilterbank:
    def test_shape(self, feature_config):
        fb = dsp.mel_filterbank(100, 10.0, 15200.0, 2048, 32000)
        assert fb.shape == (100, 1025)

    def test_rows_nonzero(self):
        fb = dsp.mel_filterbank(100, 10.0, 15200.0, 2048, 32000)
        assert np.all(fb.sum(axis=1) > 0)

    def test_peaks_monotonic(self, feature_config):
        peaks = dsp.filterbank_peaks(feature_config)
        assert np.all(np.diff(peaks) > 0)
        assert 10.0 < peaks[0] < peaks[-1] < 15200.0

    def test_coverage_inside_band_edges(self):
        fb = dsp.mel_filterbank(100, 10.0, 15200.0, 2048, 32000)
        bin_hz = np.arange(1025) * 32000 / 2048
        inside = (bin_hz > 10.0) & (bin_hz < 15200.0)
        assert np.all(fb.sum(axis=0)[inside] > 0)

    def test_above_nyquist_rejected(self):
        with pytest.raises(ValueError, match="Nyquist"):
            dsp.mel_filterbank(100, 10.0, 17000.0, 2048, 32000)


class TestComputeMel:
    def test_frame_count_one_second(self, feature_config):
        mel = dsp.compute_mel(make_tone(220.0, 1.0), feature_config)
        assert mel.n_frames == 32000 // 160 + 1 == 201
        assert mel.n_bands == 100

    def test_frame_count_formula_various_lengths(self, feature_config):
        for n_samples in (1440, 1441, 4800, 32001, 50000):
            clip = dsp.AudioClip(np.zeros(n_samples))
            mel = dsp.compute_mel(clip, feature_config)
            assert mel.n_frames == n_samples // 160 + 1

    def test_silence_is_log_floor(self, feature_config):
        mel = dsp.compute_mel(dsp.AudioClip(np.zeros(8000)), feature_config)
        assert np.allclose(mel.values, np.log(feature_config.log_floor))

    def test_values_bounded_below_by_floor(self, feature_config):
        mel = dsp.compute_mel(make_tone(440.0, 0.5), feature_config)
        assert np.all(mel.values >= np.log(feature_config.log_floor) - 1e-12)

    def test_pure_tone_peaks_at_nearest_band(self, feature_config):
        peaks = dsp.filterbank_peaks(feature_config)
        for freq in (110.0, 440.0, 1000.0, 3000.0):
            mel = dsp.compute_mel(make_tone(freq, 0.5), feature_config)
            expected_band = int(np.argmin(np.abs(peaks - freq)))
            got = np.argmax(mel.values, axis=1)
            assert np.all(got == expected_band), f"{freq} Hz: bands {np.unique(got)} != {expected_band}"

    def test_deterministic(self, feature_config):
        clip = make_tone(523.25, 0.4)
        a = dsp.compute_mel(clip, feature_config)
        b = dsp.compute_mel(clip, feature_config)
        assert np.array_equal(a.values, b.values)

    def test_too_short_rejected(self, feature_config):
        with pytest.raises(ValueError, match="too short"):
            dsp.compute_mel(dsp.AudioClip(np.zeros(100)), feature_config)


class TestTransposeAugment:
    def test_unit_factor_is_identity_on_matching_grid(self, feature_config):
        clip = make_tone(330.0, 0.5)
        mel = dsp.compute_mel(clip, feature_config)
        aug = dsp.transpose_augment(clip, mel.n_frames, 1.0, feature_config)
        assert np.allclose(aug.values, mel.values)

    def test_octave_up_moves_dominant_band(self, feature_config):
        clip = make_tone(220.0, 0.6)
        mel = dsp.compute_mel(clip, feature_config)
        aug = dsp.transpose_augment(clip, mel.n_frames, 2.0, feature_config)
        assert aug.n_frames == mel.n_frames
        direct = dsp.compute_mel(make_tone(440.0, 0.6), feature_config)
        mid = mel.n_frames // 2
        assert np.argmax(aug.values[mid]) == np.argmax(direct.values[mid])

    def test_output_always_matches_label_frames(self, feature_config):
        clip = make_tone(261.63, 0.5)
        for factor in (0.7937, 0.8909, 1.0, 1.1225, 1.2599):
            for frames in (90, 101, 140):
                aug = dsp.transpose_augment(clip, frames, factor, feature_config)
                assert aug.n_frames == frames

    def test_nonpositive_factor_rejected(self, feature_config):
        with pytest.raises(ValueError, match="factor"):
            dsp.transpose_augment(make_tone(220.0, 0.3), 50, -1.0, feature_config)


class TestNormalizeF0:
    def setup_method(self):
        self.stats = dsp.CorpusStats(log_f0_min=np.log(100.0), log_f0_max=np.log(400.0))

    def test_all_unvoiced_gives_zeros(self):
        track = dsp.F0Track(f0_hz=np.zeros(10), voiced=np.zeros(10, dtype=bool))
        out = dsp.normalize_f0(track, self.stats)
        assert out.shape == (10, 2)
        assert np.all(out == 0.0)

    def test_corpus_max_maps_to_one(self):
        track = dsp.F0Track(f0_hz=np.full(5, 400.0), voiced=np.ones(5, dtype=bool))
        out = dsp.normalize_f0(track, self.stats)
        assert np.allclose(out[:, 0], 1.0)
        assert np.all(out[:, 1] == 1.0)

    def test_corpus_min_maps_to_minus_one(self):
        track = dsp.F0Track(f0_hz=np.full(5, 100.0), voiced=np.ones(5, dtype=bool))
        out = dsp.normalize_f0(track, self.stats)
        assert np.allclose(out[:, 0], -1.0)

    def test_hold_last_voiced_value_over_unvoiced_run(self):
        f0 = np.array([0.0, 200.0, 200.0, 0.0, 0.0, 0.0, 300.0, 0.0])
        track = dsp.F0Track(f0_hz=f0, voiced=f0 > 0)
        out = dsp.normalize_f0(track, self.stats)
        held = out[2, 0]
        assert out[0, 0] == 0.0  # before first voiced frame
        assert out[3, 0] == out[4, 0] == out[5, 0] == held
        assert out[7, 0] == out[6, 0]
        assert np.array_equal(out[:, 1], (f0 > 0).astype(float))

    def test_out_of_range_clipped(self):
        track = dsp.F0Track(f0_hz=np.array([50.0, 800.0]), voiced=np.array([True, True]))
        out = dsp.normalize_f0(track, self.stats)
        assert out[0, 0] == -1.0 and out[1, 0] == 1.0

    def test_empty_track_rejected(self):
        track = dsp.F0Track(f0_hz=np.zeros(0), voiced=np.zeros(0, dtype=bool))
        with pytest.raises(ValueError, match="empty"):
            dsp.normalize_f0(track, self.stats)


def test_pitch_scaling_property(feature_config):
    """Transposing a tone lands its energy on the band of the scaled frequency."""
    peaks = dsp.filterbank_peaks(feature_config)
    rng = np.random.default_rng(3)
    for _ in range(6):
        freq = float(rng.uniform(150, 1500))
        factor = float(2.0 ** (rng.uniform(-4, 4) / 12.0))
        clip = make_tone(freq, 0.4)
        mel = dsp.compute_mel(clip, feature_config)
        aug = dsp.transpose_augment(clip, mel.n_frames, factor, feature_config)
        direct = dsp.compute_mel(make_tone(freq * factor, 0.4), feature_config)
        mid = mel.n_frames // 2
        assert abs(int(np.argmax(aug.values[mid])) - int(np.argmax(direct.values[mid]))) <= 0

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdvc.audio import (
    FramingSpec,
    MelConfig,
    Waveform,
    frame_count,
    frame_signal,
    hz_to_mel,
    istft,
    mel_center_frequencies,
    mel_filterbank,
    mel_spectrogram,
    mel_to_hz,
    ms_to_samples,
    read_wav,
    reconstruct_waveform,
    stft,
    write_wav,
)
from cdvc.errors import FormatError, ValidationError

SR = 16000


def tone(freq_hz, dur_s=1.0, amp=0.3, sr=SR):
    t = np.arange(int(dur_s * sr)) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq_hz * t), sr)


class TestWaveform:
    def test_rejects_empty(self):
        with pytest.raises(ValidationError):
            Waveform(np.array([]))

    def test_rejects_nan(self):
        with pytest.raises(ValidationError):
            Waveform(np.array([0.0, np.nan]))

    def test_rejects_2d(self):
        with pytest.raises(ValidationError):
            Waveform(np.zeros((4, 2)))

    def test_duration(self):
        assert Waveform(np.zeros(8000), SR).duration_s == 0.5

    def test_samples_coerced_to_float64(self):
        w = Waveform(np.array([1, -1], dtype=np.int16))
        assert w.samples.dtype == np.float64


class TestFraming:
    def test_quality_geometry_one_second(self):
        # 150 ms / 40 ms on 1 s: 1 + (16000 - 2400) // 640
        assert frame_count(SR, FramingSpec(150, 40), SR) == 22

    def test_scene_geometry_one_second(self):
        assert frame_count(SR, FramingSpec(160, 50), SR) == 17

    def test_mel_geometry_one_second(self):
        assert frame_count(SR, FramingSpec(64, 10), SR) == 94

    def test_short_input_is_one_padded_frame(self):
        assert frame_count(100, FramingSpec(64, 10), SR) == 1
        frames = frame_signal(np.ones(100), 1024, 160)
        assert frames.shape == (1, 1024)
        assert frames[0, 100:].sum() == 0.0

    def test_invalid_spec(self):
        with pytest.raises(ValidationError):
            FramingSpec(10, 20)
        with pytest.raises(ValidationError):
            FramingSpec(10, 0)

    def test_frame_signal_matches_manual_slices(self):
        x = np.arange(20.0)
        frames = frame_signal(x, 8, 3)
        assert frames.shape == (5, 8)
        for i in range(5):
            np.testing.assert_array_equal(frames[i], x[3 * i : 3 * i + 8])

    @given(st.integers(1, 5000), st.integers(1, 400), st.integers(1, 400))
    def test_count_agrees_with_frame_signal(self, n, length, shift):
        if shift > length:
            shift = length
        spec_rows = frame_signal(np.zeros(n), length, shift).shape[0]
        expected = 1 if n < length else 1 + (n - length) // shift
        assert spec_rows == expected

    def test_ms_to_samples_rounds(self):
        assert ms_to_samples(64, SR) == 1024
        assert ms_to_samples(10, SR) == 160
        assert ms_to_samples(150, SR) == 2400


class TestWavIO:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        ints = rng.integers(-32768, 32768, size=1234, dtype=np.int16)
        w = Waveform(ints.astype(np.float64) / 32768.0, SR)
        p = tmp_path / "a.wav"
        write_wav(w, p)
        back = read_wav(p)
        assert back.sample_rate_hz == SR
        np.testing.assert_array_equal(back.samples, w.samples)

    def test_write_read_write_is_byte_stable(self, tmp_path):
        w = tone(440.0, 0.25)
        p1, p2 = tmp_path / "a.wav", tmp_path / "b.wav"
        write_wav(w, p1)
        write_wav(read_wav(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_clipping_on_write(self, tmp_path):
        w = Waveform(np.array([2.0, -2.0, 1.0]), SR)
        p = tmp_path / "c.wav"
        write_wav(w, p)
        back = read_wav(p)
        assert back.samples[0] == pytest.approx(32767 / 32768.0)
        assert back.samples[1] == -1.0

    def test_rejects_non_wav(self, tmp_path):
        p = tmp_path / "x.wav"
        p.write_bytes(b"not a riff file")
        with pytest.raises(FormatError):
            read_wav(p)

    def test_rejects_stereo(self, tmp_path):
        import wave

        p = tmp_path / "st.wav"
        with wave.open(str(p), "wb") as f:
            f.setnchannels(2)
            f.setsampwidth(2)
            f.setframerate(SR)
            f.writeframes(b"\x00\x00" * 8)
        with pytest.raises(FormatError):
            read_wav(p)


class TestMelScale:
    @given(st.floats(0.0, 8000.0))
    def test_hz_mel_inverse(self, f):
        assert mel_to_hz(hz_to_mel(f)) == pytest.approx(f, abs=1e-6)

    def test_monotone(self):
        f = np.linspace(0, 8000, 200)
        assert np.all(np.diff(hz_to_mel(f)) > 0)

    def test_filterbank_shape_and_range(self):
        fb = mel_filterbank(SR, 1024, 80)
        assert fb.shape == (80, 513)
        assert fb.min() >= 0.0
        assert fb.max() <= 1.0 + 1e-12
        # every filter passes some energy
        assert np.all(fb.sum(axis=1) > 0)

    def test_center_frequencies_monotone(self):
        c = mel_center_frequencies(SR, 80)
        assert c.shape == (80,)
        assert np.all(np.diff(c) > 0)
        assert 0 < c[0] < c[-1] < SR / 2


class TestMelSpectrogram:
    def test_one_second_shape(self):
        m = mel_spectrogram(tone(440.0))
        assert m.values.shape == (94, 80)

    def test_silence_hits_floor(self):
        cfg = MelConfig()
        m = mel_spectrogram(Waveform(np.zeros(SR), SR), cfg)
        np.testing.assert_allclose(m.values, np.log(cfg.floor))

    def test_gain_shifts_log_energy(self):
        # doubling amplitude quadruples power: +log(4) wherever above floor
        quiet = mel_spectrogram(tone(440.0, amp=0.2))
        loud = mel_spectrogram(tone(440.0, amp=0.4))
        band = int(np.argmax(quiet.values[5]))
        np.testing.assert_allclose(
            loud.values[:, band] - quiet.values[:, band], np.log(4.0), atol=1e-9
        )

    def test_tone_lands_in_matching_band(self):
        m = mel_spectrogram(tone(1000.0))
        centers = mel_center_frequencies(SR, 80)
        band = int(np.argmax(m.values[10]))
        assert abs(centers[band] - 1000.0) < 120.0

    def test_rate_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            mel_spectrogram(Waveform(np.zeros(8000), 8000), MelConfig())

    def test_deterministic(self):
        a = mel_spectrogram(tone(700.0))
        b = mel_spectrogram(tone(700.0))
        np.testing.assert_array_equal(a.values, b.values)


class TestStft:
    def test_inverse_is_exact_away_from_edges(self):
        # the first/last window span has near-zero window mass, so skip it
        rng = np.random.default_rng(3)
        x = rng.standard_normal(SR)
        spec = stft(x, 1024, 160)
        y = istft(spec, 1024, 160)
        np.testing.assert_allclose(y[1024:-1024], x[1024 : y.size - 1024], atol=1e-9)

    def test_istft_length(self):
        spec = stft(np.zeros(SR), 1024, 160)
        assert istft(spec, 1024, 160).size == (spec.shape[0] - 1) * 160 + 1024


class TestReconstruction:
    def test_tone_keeps_dominant_band(self):
        m = mel_spectrogram(tone(800.0, 0.5))
        w = reconstruct_waveform(m, iterations=16)
        m2 = mel_spectrogram(Waveform(w.samples[: SR // 2], SR))
        n = min(m.n_frames, m2.n_frames)
        hits = sum(
            abs(int(np.argmax(m.values[i])) - int(np.argmax(m2.values[i]))) <= 1
            for i in range(n)
        )
        assert hits / n > 0.9

    def test_rejects_zero_iterations(self):
        m = mel_spectrogram(tone(440.0, 0.2))
        with pytest.raises(ValueError):
            reconstruct_waveform(m, iterations=0)

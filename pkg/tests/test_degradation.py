import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdvc.audio import Waveform, read_wav
from cdvc.degradation import (
    FILTERED_FAMILY,
    MODULATED_FAMILY,
    NoiseBank,
    SnrSpec,
    draw_noise,
    fit_noise_length,
    load_noise_bank,
    measure_snr,
    mix,
    sample_snr,
    save_noise_bank,
    scale_for_snr,
    synthesize_noise_bank,
)
from cdvc.errors import DegenerateInputError, ShapeError, ValidationError

SR = 16000


def tone(freq_hz, n=SR, amp=0.3):
    t = np.arange(n) / SR
    return Waveform(amp * np.sin(2 * np.pi * freq_hz * t), SR)


def white(n=SR, seed=0, amp=0.1):
    return Waveform(amp * np.random.default_rng(seed).standard_normal(n), SR)


class TestSnrMath:
    @given(st.floats(-10.0, 30.0))
    @settings(max_examples=30, deadline=None)
    def test_scale_hits_target_exactly(self, snr_db):
        clean, noise = tone(500.0), white(seed=1)
        alpha = scale_for_snr(clean, noise, snr_db)
        achieved = measure_snr(clean, Waveform(alpha * noise.samples, SR))
        assert achieved == pytest.approx(snr_db, abs=1e-9)

    def test_zero_db_means_equal_power(self):
        clean, noise = tone(500.0), white(seed=2)
        alpha = scale_for_snr(clean, noise, 0.0)
        p_clean = np.mean(clean.samples**2)
        p_noise = np.mean((alpha * noise.samples) ** 2)
        assert p_noise == pytest.approx(p_clean, rel=1e-12)

    def test_plus_ten_db_is_tenth_power(self):
        clean, noise = tone(500.0), white(seed=3)
        alpha = scale_for_snr(clean, noise, 10.0)
        ratio = np.mean(clean.samples**2) / np.mean((alpha * noise.samples) ** 2)
        assert ratio == pytest.approx(10.0, rel=1e-12)

    def test_silent_inputs_rejected(self):
        silent = Waveform(np.zeros(SR), SR)
        with pytest.raises(DegenerateInputError):
            scale_for_snr(silent, white(), 0.0)
        with pytest.raises(DegenerateInputError):
            scale_for_snr(tone(440.0), silent, 0.0)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            scale_for_snr(tone(440.0, n=100), white(n=200), 0.0)

    def test_measure_snr_sentinels(self):
        silent = Waveform(np.zeros(SR), SR)
        assert measure_snr(tone(440.0), silent) == math.inf
        assert measure_snr(silent, white()) == -math.inf


class TestNoiseFitting:
    def test_tiles_short_noise(self):
        noise = Waveform(np.array([1.0, 2.0, 3.0]), SR)
        rng = np.random.default_rng(0)
        out = fit_noise_length(noise, 7, rng)
        np.testing.assert_array_equal(out, [1, 2, 3, 1, 2, 3, 1])

    def test_crops_long_noise(self):
        noise = white(n=1000, seed=4)
        rng = np.random.default_rng(5)
        out = fit_noise_length(noise, 300, rng)
        assert out.size == 300
        # the crop is a contiguous slice of the source
        found = any(
            np.array_equal(out, noise.samples[o : o + 300]) for o in range(701)
        )
        assert found

    def test_exact_length_copies(self):
        noise = white(n=64, seed=6)
        out = fit_noise_length(noise, 64, np.random.default_rng(0))
        np.testing.assert_array_equal(out, noise.samples)
        assert out is not noise.samples


class TestMix:
    def test_mix_achieves_target(self):
        clean = tone(600.0)
        noise = white(n=2 * SR, seed=7)
        mixed = mix(clean, noise, 5.0, np.random.default_rng(8))
        measured = measure_snr(clean, Waveform(mixed.samples - clean.samples, SR))
        assert measured == pytest.approx(5.0, abs=1e-6)

    def test_infinite_snr_returns_clean(self):
        clean = tone(600.0)
        mixed = mix(clean, white(seed=9), math.inf)
        np.testing.assert_array_equal(mixed.samples, clean.samples)

    def test_mix_is_seeded(self):
        clean = tone(600.0)
        noise = white(n=3 * SR, seed=10)
        a = mix(clean, noise, 3.0, np.random.default_rng(11))
        b = mix(clean, noise, 3.0, np.random.default_rng(11))
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_sample_snr_within_range(self):
        spec = SnrSpec(0.0, 20.0)
        rng = np.random.default_rng(12)
        draws = [sample_snr(spec, rng) for _ in range(200)]
        assert all(0.0 <= d <= 20.0 for d in draws)
        assert max(draws) - min(draws) > 5.0

    def test_degenerate_range(self):
        assert sample_snr(SnrSpec(7.0, 7.0), np.random.default_rng(0)) == 7.0

    def test_inverted_range_rejected(self):
        with pytest.raises(ValidationError):
            SnrSpec(10.0, 0.0)


class TestNoiseBank:
    def test_bank_is_deterministic(self):
        a = synthesize_noise_bank(FILTERED_FAMILY, 4, duration_s=0.5, seed=3)
        b = synthesize_noise_bank(FILTERED_FAMILY, 4, duration_s=0.5, seed=3)
        for (ida, wa), (idb, wb) in zip(a.entries, b.entries):
            assert ida == idb
            np.testing.assert_array_equal(wa.samples, wb.samples)

    def test_families_differ(self):
        a = synthesize_noise_bank(FILTERED_FAMILY, 2, duration_s=0.5, seed=0)
        b = synthesize_noise_bank(MODULATED_FAMILY, 2, duration_s=0.5, seed=0)
        assert set(a.ids()).isdisjoint(b.ids())

    def test_entries_are_rms_normalized(self):
        bank = synthesize_noise_bank(MODULATED_FAMILY, 3, duration_s=0.5, seed=1)
        for _, w in bank.entries:
            assert w.rms() == pytest.approx(0.1, rel=1e-9)

    def test_unknown_family_rejected(self):
        with pytest.raises(ValidationError):
            synthesize_noise_bank("pink-elephants", 2)

    def test_empty_bank_rejected(self):
        with pytest.raises(ValidationError):
            NoiseBank([])

    def test_draw_noise_covers_bank(self):
        bank = synthesize_noise_bank(FILTERED_FAMILY, 6, duration_s=0.2, seed=2)
        rng = np.random.default_rng(13)
        seen = {draw_noise(bank, rng)[0] for _ in range(200)}
        assert seen == set(bank.ids())

    def test_save_load_round_trip(self, tmp_path):
        bank = synthesize_noise_bank(FILTERED_FAMILY, 3, duration_s=0.3, seed=4)
        manifest = tmp_path / "bank.tsv"
        save_noise_bank(bank, manifest, tmp_path / "noise")
        back = load_noise_bank(manifest, rng_seed=4)
        assert back.ids() == bank.ids()
        for (_, wa), (_, wb) in zip(bank.entries, back.entries):
            # PCM16 quantization on save
            np.testing.assert_allclose(wa.samples, wb.samples, atol=1.0 / 32768.0)
        # saved wavs are readable on their own
        first = read_wav(tmp_path / "noise" / f"{bank.ids()[0]}.wav")
        assert first.sample_rate_hz == SR

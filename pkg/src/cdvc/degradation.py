"""Pseudo-noisy speech construction at controlled SNR, plus synthetic noise banks.

The noisy source is clean + alpha * noise, where alpha is chosen so the
power-ratio SNR hits the requested target exactly. A target of +inf is the
no-noise sentinel. Two disjoint synthetic noise families stand in for seen
(training) and unseen (evaluation) noise corpora.
"""

from __future__ import annotations

import math
import os
import zlib
from dataclasses import dataclass

import numpy as np

from .audio import Waveform, read_wav, write_wav
from .errors import DegenerateInputError, ShapeError, ValidationError

CLEAN_SNR_DB = math.inf  # sentinel: no noise added


@dataclass(frozen=True)
class SnrSpec:
    low_db: float
    high_db: float

    def __post_init__(self):
        if not self.low_db <= self.high_db:
            raise ValidationError(f"SNR range inverted: [{self.low_db}, {self.high_db}]")


@dataclass
class NoiseBank:
    entries: list  # (noise_id, Waveform) pairs
    rng_seed: int = 0

    def __post_init__(self):
        if not self.entries:
            raise ValidationError("noise bank is empty")
        rates = {w.sample_rate_hz for _, w in self.entries}
        if len(rates) != 1:
            raise ValidationError(f"noise bank mixes sample rates: {sorted(rates)}")
        for noise_id, w in self.entries:
            if w.rms() == 0.0:
                raise ValidationError(f"noise '{noise_id}' is silent")

    @property
    def sample_rate_hz(self) -> int:
        return self.entries[0][1].sample_rate_hz

    def ids(self):
        return [noise_id for noise_id, _ in self.entries]


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.asarray(x, dtype=np.float64) ** 2))


def scale_for_snr(clean: Waveform, noise: Waveform, target_snr_db: float) -> float:
    """Gain alpha such that mixing clean + alpha*noise yields exactly target_snr_db."""
    if clean.samples.size != noise.samples.size:
        raise ShapeError("clean and noise must have equal lengths")
    if clean.sample_rate_hz != noise.sample_rate_hz:
        raise ValidationError("clean and noise sample rates differ")
    p_clean = _power(clean.samples)
    p_noise = _power(noise.samples)
    if p_clean == 0.0 or p_noise == 0.0:
        raise DegenerateInputError("silent clean or noise input")
    return math.sqrt(p_clean / (p_noise * 10.0 ** (target_snr_db / 10.0)))


def measure_snr(clean: Waveform, noise_component: Waveform) -> float:
    """10*log10 of clean-to-noise power; +/-inf sentinels for silent components."""
    if clean.samples.size != noise_component.samples.size:
        raise ShapeError("clean and noise must have equal lengths")
    p_clean = _power(clean.samples)
    p_noise = _power(noise_component.samples)
    if p_noise == 0.0:
        return math.inf
    if p_clean == 0.0:
        return -math.inf
    return 10.0 * math.log10(p_clean / p_noise)


def fit_noise_length(noise: Waveform, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Tile noise shorter than n_samples; crop a random segment from longer noise."""
    x = noise.samples
    if x.size == n_samples:
        return x.copy()
    if x.size < n_samples:
        reps = -(-n_samples // x.size)
        return np.tile(x, reps)[:n_samples]
    offset = int(rng.integers(0, x.size - n_samples + 1))
    return x[offset : offset + n_samples].copy()


def mix(
    clean: Waveform,
    noise: Waveform,
    target_snr_db: float,
    rng: np.random.Generator | None = None,
) -> Waveform:
    """clean + alpha*noise at the target SNR; not renormalized, so may exceed [-1, 1]."""
    if math.isinf(target_snr_db) and target_snr_db > 0:
        return Waveform(clean.samples.copy(), clean.sample_rate_hz)
    rng = rng if rng is not None else np.random.default_rng(0)
    segment = fit_noise_length(noise, clean.samples.size, rng)
    alpha = scale_for_snr(clean, Waveform(segment, noise.sample_rate_hz), target_snr_db)
    return Waveform(clean.samples + alpha * segment, clean.sample_rate_hz)


def sample_snr(spec: SnrSpec, rng: np.random.Generator) -> float:
    if spec.low_db == spec.high_db:
        return spec.low_db
    return float(rng.uniform(spec.low_db, spec.high_db))


def draw_noise(bank: NoiseBank, rng: np.random.Generator):
    """Uniformly pick one (noise_id, Waveform) entry."""
    idx = int(rng.integers(0, len(bank.entries)))
    return bank.entries[idx]


# ---------------------------------------------------------------------------
# Synthetic noise banks
# ---------------------------------------------------------------------------

FILTERED_FAMILY = "filtered"    # spectrally shaped gaussian noise (training / seen)
MODULATED_FAMILY = "modulated"  # amplitude-modulated tones and bursts (evaluation / unseen)


def _shaped_gaussian(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """White gaussian noise shaped in the frequency domain by a random filter."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / sr)
    kind = rng.integers(0, 4)
    if kind == 0:  # lowpass
        cutoff = rng.uniform(500.0, 3000.0)
        gain = 1.0 / (1.0 + (freqs / cutoff) ** 4)
    elif kind == 1:  # highpass
        cutoff = rng.uniform(1000.0, 5000.0)
        gain = (freqs / cutoff) ** 4 / (1.0 + (freqs / cutoff) ** 4)
    elif kind == 2:  # bandpass
        center = rng.uniform(600.0, 4000.0)
        width = center * rng.uniform(0.3, 0.8)
        gain = np.exp(-0.5 * ((freqs - center) / width) ** 2)
    else:  # 1/f^a slope
        a = rng.uniform(0.5, 1.5)
        gain = 1.0 / np.maximum(freqs, 50.0) ** a
    return np.fft.irfft(spec * gain, n=n)


def _modulated_tonal(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Amplitude-modulated tone stacks, periodic noise bursts, or chirps."""
    t = np.arange(n) / sr
    kind = rng.integers(0, 3)
    if kind == 0:  # AM tone stack
        out = np.zeros(n)
        for _ in range(int(rng.integers(2, 5))):
            f = rng.uniform(300.0, 5000.0)
            out += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        am = 0.5 * (1.0 + np.sin(2 * np.pi * rng.uniform(1.0, 8.0) * t))
        return out * am
    if kind == 1:  # periodic noise bursts
        burst = rng.standard_normal(n)
        rate = rng.uniform(2.0, 10.0)
        gate = (np.sin(2 * np.pi * rate * t) > rng.uniform(-0.3, 0.5)).astype(np.float64)
        return burst * gate + 1e-4 * rng.standard_normal(n)
    # linear chirp
    f0 = rng.uniform(200.0, 1000.0)
    f1 = rng.uniform(2000.0, 7000.0)
    return np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / t[-1] * t**2))


def synthesize_noise_bank(
    family: str,
    n_entries: int,
    duration_s: float = 3.0,
    sample_rate_hz: int = 16000,
    seed: int = 0,
) -> NoiseBank:
    """Deterministic bank of synthetic noises from one family, RMS-normalized to 0.1."""
    if family not in (FILTERED_FAMILY, MODULATED_FAMILY):
        raise ValidationError(f"unknown noise family '{family}'")
    maker = _shaped_gaussian if family == FILTERED_FAMILY else _modulated_tonal
    n = int(round(duration_s * sample_rate_hz))
    entries = []
    for i in range(n_entries):
        rng = np.random.default_rng([seed, zlib.crc32(family.encode()), i])
        x = maker(n, sample_rate_hz, rng)
        x = 0.1 * x / max(np.sqrt(np.mean(x**2)), 1e-12)
        entries.append((f"{family}{i:03d}", Waveform(x, sample_rate_hz)))
    return NoiseBank(entries, rng_seed=seed)


# ---------------------------------------------------------------------------
# Bank manifest I/O: one "noise_id <TAB> path" record per line
# ---------------------------------------------------------------------------

def save_noise_bank(bank: NoiseBank, manifest_path, wav_dir) -> None:
    os.makedirs(wav_dir, exist_ok=True)
    with open(manifest_path, "w", encoding="utf-8") as f:
        for noise_id, w in bank.entries:
            path = os.path.join(wav_dir, f"{noise_id}.wav")
            write_wav(w, path)
            f.write(f"{noise_id}\t{path}\n")


def load_noise_bank(manifest_path, rng_seed: int = 0) -> NoiseBank:
    entries = []
    with open(manifest_path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"{manifest_path}:{line_no}: expected 'noise_id<TAB>path'")
            entries.append((parts[0], read_wav(parts[1])))
    return NoiseBank(entries, rng_seed=rng_seed)

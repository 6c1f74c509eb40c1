"""Deterministic synthetic toy-speech corpus.

Utterances are sequences of vowel-like tokens. Each token owns a resonance
center on a geometric frequency grid; a token segment is a tone at that
center (scaled by the speaker's formant shift) plus a resonance-shaped
harmonic stack at the speaker's f0 with spectral tilt. Content is therefore
recoverable by band-energy classification while speaker identity lives in
f0, tilt, and formant shift.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass

import numpy as np

from .audio import DEFAULT_SAMPLE_RATE, Waveform, write_wav
from .errors import ValidationError

TOKEN_ALPHABET = "abcdefgh"

# Geometric grid 400..3200 Hz; adjacent centers are a factor 8^(1/7) apart, so
# the +-10% speaker formant shift always stays inside a token's frequency cell.
TOKEN_CENTER_HZ = 400.0 * (8.0 ** (np.arange(8) / 7.0))

# 1-sigma width of the resonance gain in natural-log frequency units.
RESONANCE_SIGMA = 0.16

FORMANT_SHIFT_RANGE = (0.92, 1.10)


@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    f0_hz: float
    spectral_tilt_db_per_oct: float
    formant_shift: float

    def __post_init__(self):
        if not 80.0 <= self.f0_hz <= 300.0:
            raise ValidationError(f"f0 {self.f0_hz} outside [80, 300] Hz")
        lo, hi = FORMANT_SHIFT_RANGE
        if not lo <= self.formant_shift <= hi:
            raise ValidationError(f"formant shift {self.formant_shift} outside [{lo}, {hi}]")


@dataclass
class Utterance:
    utterance_id: str
    speaker_id: str
    tokens: str
    wav_path: str = ""


def token_center_hz(token: str) -> float:
    idx = TOKEN_ALPHABET.find(token)
    if idx < 0:
        raise ValueError(f"unknown token '{token}'")
    return float(TOKEN_CENTER_HZ[idx])


def _resonance_gain(freq_hz: np.ndarray, center_hz: float) -> np.ndarray:
    logdiff = np.log(np.maximum(freq_hz, 1.0)) - np.log(center_hz)
    return np.exp(-0.5 * (logdiff / RESONANCE_SIGMA) ** 2)


def synthesize(
    speaker: SyntheticSpeaker,
    tokens: str,
    duration_per_token_ms: float = 100.0,
    seed: int = 0,
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
) -> Waveform:
    """Render a token sequence for one speaker; deterministic in (speaker, tokens, seed)."""
    if not tokens:
        raise ValueError("token sequence is empty")
    rng = np.random.default_rng([seed, zlib.crc32(speaker.speaker_id.encode()),
                                 zlib.crc32(tokens.encode())])
    n_tok = int(round(duration_per_token_ms * sample_rate_hz / 1000.0))
    fade = np.ones(n_tok)
    n_fade = min(int(0.005 * sample_rate_hz), n_tok // 4)
    if n_fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(n_fade) / n_fade)
        fade[:n_fade] = ramp
        fade[-n_fade:] = ramp[::-1]

    n_harm = int(0.45 * sample_rate_hz / speaker.f0_hz)
    harm_f = speaker.f0_hz * np.arange(1, n_harm + 1)
    tilt = 10.0 ** (speaker.spectral_tilt_db_per_oct * np.log2(np.arange(1, n_harm + 1)) / 20.0)

    t = np.arange(n_tok) / sample_rate_hz
    segments = []
    for token in tokens:
        center = token_center_hz(token) * speaker.formant_shift
        # Voicing bar at f0 sits below every token cell (>= 345 Hz), so it marks
        # the speaker without disturbing band-energy token classification.
        bar = np.sin(2 * np.pi * speaker.f0_hz * t + rng.uniform(0, 2 * np.pi))
        tone = np.sin(2 * np.pi * center * t + rng.uniform(0, 2 * np.pi))
        amps = tilt * _resonance_gain(harm_f, center)
        phases = rng.uniform(0, 2 * np.pi, n_harm)
        stack = (amps[:, None] * np.sin(2 * np.pi * harm_f[:, None] * t[None, :]
                                        + phases[:, None])).sum(axis=0)
        stack_rms = np.sqrt(np.mean(stack**2))
        if stack_rms > 0:
            stack = stack / stack_rms
        level = rng.uniform(0.8, 1.0)
        segments.append(level * fade * (1.3 * bar + tone + 0.6 * stack))

    x = np.concatenate(segments)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = 0.5 * x / peak
    return Waveform(x, sample_rate_hz)


def _token_sequence(rng: np.random.Generator, length: int) -> str:
    """Random tokens with no immediate repeats (keeps run-length decoding exact)."""
    out = [TOKEN_ALPHABET[rng.integers(0, 8)]]
    while len(out) < length:
        step = int(rng.integers(1, 8))
        out.append(TOKEN_ALPHABET[(TOKEN_ALPHABET.index(out[-1]) + step) % 8])
    return "".join(out)


def make_speakers(n_speakers: int, seed: int) -> list:
    """Speakers spread across f0 / tilt / formant-shift so every pair is separable."""
    rng = np.random.default_rng([seed, 0x5BEA])
    f0_grid = np.linspace(95.0, 245.0, n_speakers) + rng.uniform(-3.0, 3.0, n_speakers)
    shift_grid = np.linspace(0.925, 1.095, n_speakers)
    tilt_grid = np.linspace(-9.0, -1.0, n_speakers)
    order = rng.permutation(n_speakers)
    speakers = []
    for i in range(n_speakers):
        speakers.append(
            SyntheticSpeaker(
                speaker_id=f"spk{i:03d}",
                f0_hz=float(np.clip(f0_grid[i], 90.0, 250.0)),
                spectral_tilt_db_per_oct=float(tilt_grid[order[i]]),
                formant_shift=float(shift_grid[order[(i + 1) % n_speakers]]),
            )
        )
    return speakers


def _split_counts(n_speakers: int, split_spec) -> list:
    fracs = list(split_spec)
    if abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")
    n_nonzero = sum(1 for f in fracs if f > 0)
    if n_speakers < n_nonzero:
        raise ValueError(f"{n_speakers} speakers cannot cover {n_nonzero} splits")
    counts = [max(1, int(round(f * n_speakers))) if f > 0 else 0 for f in fracs]
    # Reconcile rounding drift against the largest split.
    largest = max(range(len(counts)), key=lambda i: counts[i])
    counts[largest] += n_speakers - sum(counts)
    if counts[largest] < 1:
        raise ValueError("split fractions leave the largest split empty")
    return counts


def generate_corpus(
    out_dir,
    n_speakers: int,
    n_utts_per_speaker: int,
    split_spec=(0.8, 0.1, 0.1),
    seed: int = 0,
    duration_per_token_ms: float = 100.0,
    tokens_per_utt=(6, 10),
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE,
) -> dict:
    """Write wavs plus speaker-disjoint train/valid/eval manifests; returns manifest paths."""
    counts = _split_counts(n_speakers, split_spec)
    speakers = make_speakers(n_speakers, seed)
    wav_dir = os.path.join(out_dir, "wav")
    os.makedirs(wav_dir, exist_ok=True)

    lo, hi = tokens_per_utt
    records = {"train": [], "valid": [], "eval": []}
    names = ["train", "valid", "eval"]
    bounds = np.cumsum([0] + counts)
    for s_idx, speaker in enumerate(speakers):
        split = names[int(np.searchsorted(bounds, s_idx, side="right")) - 1]
        for u in range(n_utts_per_speaker):
            rng = np.random.default_rng([seed, 0xC0DE, s_idx, u])
            tokens = _token_sequence(rng, int(rng.integers(lo, hi + 1)))
            utt_id = f"{speaker.speaker_id}_u{u:03d}"
            w = synthesize(speaker, tokens, duration_per_token_ms,
                           seed=seed, sample_rate_hz=sample_rate_hz)
            path = os.path.join(wav_dir, f"{utt_id}.wav")
            write_wav(w, path)
            records[split].append(Utterance(utt_id, speaker.speaker_id, tokens, path))

    paths = {}
    for split in names:
        manifest = os.path.join(out_dir, f"{split}.tsv")
        write_manifest(records[split], manifest)
        paths[split] = manifest
    return paths


def write_manifest(entries, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(f"{e.utterance_id}\t{e.speaker_id}\t{e.wav_path}\t{e.tokens}\n")


def read_manifest(path) -> list:
    entries = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValidationError(
                    f"{path}:{line_no}: expected 'utterance_id<TAB>speaker_id<TAB>wav_path<TAB>tokens'"
                )
            entries.append(Utterance(parts[0], parts[1], parts[3], parts[2]))
    return entries

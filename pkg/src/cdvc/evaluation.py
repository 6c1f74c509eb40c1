"""Objective scoring: token error rate through a rule-based recognizer, and
speaker similarity through a spectral-statistics embedder.

The recognizer classifies each mel frame into the token whose spectral cell
holds the most energy, then collapses runs; the embedder summarizes per-band
log-energy statistics plus pitch statistics into a unit vector. Both are
deterministic functions of the waveform, so system-level scores are exactly
reproducible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .audio import (
    MelConfig,
    Waveform,
    frame_signal,
    mel_center_frequencies,
    mel_spectrogram,
    read_wav,
)
from .corpus import TOKEN_ALPHABET, TOKEN_CENTER_HZ, read_manifest
from .degradation import NoiseBank, SnrSpec, draw_noise, mix, sample_snr
from .errors import DegenerateInputError, ValidationError
from .model import model_from_checkpoint
from .training import convert_waveforms

EMBEDDER_ID = "band-stats-pitch-v1"

_MIN_RUN_FRAMES = 3          # shorter runs are boundary smear, not tokens
_SILENCE_REL = 1e-3          # frame is silent below this fraction of the loudest frame
_SILENCE_ABS = 1e-2          # and below this absolute cell energy regardless


# ---------------------------------------------------------------------------
# Edit distance and token error rate
# ---------------------------------------------------------------------------

def edit_distance(a, b) -> int:
    """Minimal insert/delete/substitute count between two sequences."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        current = [i]
        for j, y in enumerate(b, 1):
            current.append(min(
                previous[j] + 1,
                current[j - 1] + 1,
                previous[j - 1] + (x != y),
            ))
        previous = current
    return previous[len(b)]


def cer(reference, hypothesis) -> float:
    """edit_distance / reference length; can exceed 1 for long hypotheses."""
    if len(reference) == 0:
        raise DegenerateInputError("reference transcript is empty")
    return edit_distance(reference, hypothesis) / len(reference)


# ---------------------------------------------------------------------------
# Rule-based recognizer over the synthetic token alphabet
# ---------------------------------------------------------------------------

def _token_cells(sample_rate_hz: int, n_mels: int) -> np.ndarray:
    """Boolean [n_tokens x n_mels]: which mel bands belong to each token's cell.

    Cell edges sit at geometric midpoints between adjacent token centers, so a
    formant shift within the speaker range never crosses into a neighbor cell.
    """
    centers = mel_center_frequencies(sample_rate_hz, n_mels)
    ratio = np.sqrt(TOKEN_CENTER_HZ[1] / TOKEN_CENTER_HZ[0])
    cells = np.zeros((TOKEN_CENTER_HZ.size, n_mels), dtype=bool)
    for k, f in enumerate(TOKEN_CENTER_HZ):
        cells[k] = (centers >= f / ratio) & (centers < f * ratio)
    return cells


def recognize(w: Waveform, mel_cfg: MelConfig | None = None) -> str:
    mel_cfg = mel_cfg or MelConfig()
    mel = mel_spectrogram(w, mel_cfg)
    energies = np.exp(mel.values)  # back to linear band power
    cells = _token_cells(mel_cfg.sample_rate_hz, mel_cfg.n_mels)
    scores = energies @ cells.T.astype(np.float64)  # [frames x tokens]
    totals = scores.sum(axis=1)

    threshold = max(_SILENCE_ABS, _SILENCE_REL * float(totals.max()))
    labels = np.where(totals < threshold, -1, scores.argmax(axis=1))

    tokens = []
    i = 0
    while i < labels.size:
        j = i
        while j < labels.size and labels[j] == labels[i]:
            j += 1
        if labels[i] >= 0 and j - i >= _MIN_RUN_FRAMES:
            token = TOKEN_ALPHABET[labels[i]]
            if not tokens or tokens[-1] != token:
                tokens.append(token)
        i = j
    return "".join(tokens)


# ---------------------------------------------------------------------------
# Speaker embedding and cosine similarity
# ---------------------------------------------------------------------------

@dataclass
class SpeakerEmbedding:
    vector: np.ndarray
    embedder_id: str = EMBEDDER_ID
    silent: bool = False

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise ValidationError("embedding has non-finite entries")


_PITCH_GRID = np.linspace(np.log(70.0), np.log(350.0), 32)
_PITCH_SIGMA = (_PITCH_GRID[1] - _PITCH_GRID[0]) / 2.0
_PITCH_WEIGHT = 2.0  # pitch separates the synthetic speakers best


def _pitch_track(samples: np.ndarray, sample_rate_hz: int) -> np.ndarray:
    """Autocorrelation pitch per 64 ms frame, 0 where unvoiced."""
    frames = frame_signal(samples, 1024, 160)
    frames = frames - frames.mean(axis=1, keepdims=True)
    lo = int(sample_rate_hz / 320.0)  # search 50..320 Hz
    hi = int(sample_rate_hz / 50.0)
    spectrum = np.fft.rfft(frames, n=2048, axis=1)
    ac = np.fft.irfft(spectrum * np.conj(spectrum), axis=1)[:, : hi + 1]
    zero_lag = np.maximum(ac[:, 0], 1e-12)
    band = ac[:, lo : hi + 1] / zero_lag[:, None]
    peak = band.argmax(axis=1)
    voiced = band[np.arange(band.shape[0]), peak] > 0.3
    f0 = np.where(voiced, sample_rate_hz / (peak + lo), 0.0)
    return f0


def _pitch_features(f0: np.ndarray) -> np.ndarray:
    """Soft log-f0 histogram plus (mean, spread, voiced fraction)."""
    voiced = f0[f0 > 0]
    if voiced.size == 0:
        return np.zeros(_PITCH_GRID.size + 3)
    log_f0 = np.log(voiced)
    bumps = np.exp(-0.5 * ((log_f0[:, None] - _PITCH_GRID) / _PITCH_SIGMA) ** 2)
    stats = [voiced.mean() / 500.0, voiced.std() / 500.0, voiced.size / f0.size]
    return np.concatenate([bumps.mean(axis=0), stats])


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def embed_speaker(w: Waveform, mel_cfg: MelConfig | None = None) -> SpeakerEmbedding:
    mel_cfg = mel_cfg or MelConfig()
    rms = w.rms()
    if rms == 0.0:
        return SpeakerEmbedding(
            np.zeros(2 * mel_cfg.n_mels + _PITCH_GRID.size + 3), silent=True
        )
    # Dividing by the RMS first makes the embedding exactly invariant to
    # power-of-two gain changes (the mel floor would otherwise leak level).
    normalized = Waveform(w.samples / rms, w.sample_rate_hz)
    mel = mel_spectrogram(normalized, mel_cfg).values

    band_means = mel.mean(axis=0)
    band_means = band_means - band_means.mean()
    band_stds = mel.std(axis=0)
    pitch = _pitch_features(_pitch_track(normalized.samples, w.sample_rate_hz))

    vector = np.concatenate([
        _unit(band_means), _unit(band_stds), _PITCH_WEIGHT * _unit(pitch),
    ])
    return SpeakerEmbedding(vector / np.linalg.norm(vector))


def secs(converted: Waveform, target_reference: Waveform) -> float:
    """Cosine similarity of the two speaker embeddings, in [-1, 1]."""
    a = embed_speaker(converted)
    b = embed_speaker(target_reference)
    if a.silent or b.silent:
        raise DegenerateInputError("cannot score a silent waveform")
    value = float(np.dot(a.vector, b.vector)
                  / (np.linalg.norm(a.vector) * np.linalg.norm(b.vector)))
    return min(1.0, max(-1.0, value))


# ---------------------------------------------------------------------------
# System evaluation
# ---------------------------------------------------------------------------

@dataclass
class PairResult:
    pair_id: str
    source_id: str
    target_id: str
    noise_id: str
    snr_db: float
    cer: float
    secs: float


@dataclass
class EvalReport:
    variant: str
    n_pairs: int
    seed: int
    rows: list = field(default_factory=list)
    identity_rows: list = field(default_factory=list)

    @staticmethod
    def _stats(rows):
        cers = np.array([r.cer for r in rows])
        ss = np.array([r.secs for r in rows])
        return float(cers.mean()), float(ss.mean()), float(ss.std())

    @property
    def mean_cer(self) -> float:
        return self._stats(self.rows)[0]

    @property
    def mean_secs(self) -> float:
        return self._stats(self.rows)[1]

    @property
    def std_secs(self) -> float:
        return self._stats(self.rows)[2]


def sample_eval_pairs(utterances, n_pairs: int, seed: int) -> list:
    """Seeded cross-speaker (source, target) utterance pairs, no replacement."""
    pairs = [(s, t) for s in utterances for t in utterances
             if s.speaker_id != t.speaker_id]
    if n_pairs > len(pairs):
        raise ValidationError(
            f"asked for {n_pairs} pairs but only {len(pairs)} cross-speaker pairs exist"
        )
    rng = np.random.default_rng([seed, 0xE7A1])
    picked = rng.choice(len(pairs), size=n_pairs, replace=False)
    return [pairs[i] for i in picked]


def evaluate_system(
    checkpoint_path,
    eval_manifest,
    n_pairs: int,
    seed: int,
    unseen_bank: NoiseBank,
    snr_spec: SnrSpec | None = None,
    mel_cfg: MelConfig | None = None,
    gl_iterations: int = 32,
    with_identity_baseline: bool = True,
) -> EvalReport:
    """Convert degraded unseen-speaker sources to unseen targets and score them.

    The identity baseline scores the degraded source itself through the same
    recognizer and embedder, bounding what conversion could preserve.
    """
    snr_spec = snr_spec or SnrSpec(0.0, 20.0)
    mel_cfg = mel_cfg or MelConfig()
    model, ckpt = model_from_checkpoint(checkpoint_path)

    utterances = read_manifest(eval_manifest)
    trained_on = set(ckpt["meta"].get("train_speakers", []))
    overlap = trained_on & {u.speaker_id for u in utterances}
    if overlap:
        raise ValidationError(f"evaluation speakers were seen in training: {sorted(overlap)}")

    pairs = sample_eval_pairs(utterances, n_pairs, seed)
    rng = np.random.default_rng([seed, 0x5C0E])
    waves = {u.utterance_id: read_wav(u.wav_path)
             for u in {p.utterance_id: p for pair in pairs for p in pair}.values()}

    report = EvalReport(model.cfg.variant, n_pairs, seed)
    for k, (src, tgt) in enumerate(pairs):
        noise_id, noise = draw_noise(unseen_bank, rng)
        snr_db = sample_snr(snr_spec, rng)
        degraded = mix(waves[src.utterance_id], noise, snr_db, rng)
        target_wave = waves[tgt.utterance_id]

        _, converted = convert_waveforms(model, degraded, target_wave,
                                         mel_cfg, gl_iterations)
        report.rows.append(PairResult(
            f"p{k:04d}", src.utterance_id, tgt.utterance_id, noise_id, snr_db,
            cer(src.tokens, recognize(converted, mel_cfg)),
            secs(converted, target_wave),
        ))
        if with_identity_baseline:
            report.identity_rows.append(PairResult(
                f"p{k:04d}", src.utterance_id, tgt.utterance_id, noise_id, snr_db,
                cer(src.tokens, recognize(degraded, mel_cfg)),
                secs(degraded, target_wave),
            ))
    return report


# ---------------------------------------------------------------------------
# Report persistence
# ---------------------------------------------------------------------------

def save_report(report: EvalReport, out_dir) -> dict:
    """pairs.tsv (one row per conversion) and summary.tsv (aggregate per system)."""
    os.makedirs(out_dir, exist_ok=True)
    pairs_path = os.path.join(out_dir, "pairs.tsv")
    with open(pairs_path, "w", encoding="utf-8") as f:
        f.write("pair_id\tsource_id\ttarget_id\tnoise_id\tsnr_db\tcer\tsecs\n")
        for r in report.rows:
            f.write(f"{r.pair_id}\t{r.source_id}\t{r.target_id}\t{r.noise_id}\t"
                    f"{r.snr_db!r}\t{r.cer!r}\t{r.secs!r}\n")

    summary_path = os.path.join(out_dir, "summary.tsv")
    with open(summary_path, "w", encoding="utf-8") as f:
        f.write("system\tn_pairs\tmean_cer\tmean_secs\tstd_secs\n")
        f.write(f"{report.variant}\t{report.n_pairs}\t{report.mean_cer!r}\t"
                f"{report.mean_secs!r}\t{report.std_secs!r}\n")
        if report.identity_rows:
            c, s, sd = EvalReport._stats(report.identity_rows)
            f.write(f"identity\t{len(report.identity_rows)}\t{c!r}\t{s!r}\t{sd!r}\n")
    return {"pairs": pairs_path, "summary": summary_path}


def load_summary(summary_path) -> list:
    """Rows of a summary.tsv as dicts with typed fields."""
    rows = []
    with open(summary_path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        expected = ["system", "n_pairs", "mean_cer", "mean_secs", "std_secs"]
        if header != expected:
            raise ValidationError(f"unexpected summary header: {header}")
        for line in f:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise ValidationError(f"malformed summary row: {line!r}")
            rows.append({
                "system": parts[0],
                "n_pairs": int(parts[1]),
                "mean_cer": float(parts[2]),
                "mean_secs": float(parts[3]),
                "std_secs": float(parts[4]),
            })
    return rows

"""Audio I/O, framing, log mel-spectrogram extraction, and phase-reconstruction synthesis.

All waveforms are mono float64 in nominal [-1, 1]; operations that can push
samples outside that range (noise mixing) do not renormalize, clipping is
applied only when writing PCM16.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import FormatError, ValidationError

DEFAULT_SAMPLE_RATE = 16000
MEL_FLOOR = 1e-5


@dataclass(frozen=True)
class FramingSpec:
    """Frame geometry in milliseconds. Shift must be positive and no longer than the frame."""

    frame_len_ms: float
    frame_shift_ms: float

    def __post_init__(self):
        if not (0 < self.frame_shift_ms <= self.frame_len_ms):
            raise ValidationError(
                f"invalid framing: len={self.frame_len_ms} ms, shift={self.frame_shift_ms} ms"
            )

    def frame_len_samples(self, sample_rate_hz: int) -> int:
        return ms_to_samples(self.frame_len_ms, sample_rate_hz)

    def frame_shift_samples(self, sample_rate_hz: int) -> int:
        return ms_to_samples(self.frame_shift_ms, sample_rate_hz)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValidationError("waveform must be a non-empty 1-D sample sequence")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("waveform contains non-finite samples")
        if self.sample_rate_hz <= 0:
            raise ValidationError("sample rate must be positive")
        self.sample_rate_hz = int(self.sample_rate_hz)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass
class MelSpectrogram:
    """Log mel energies, one row per frame. Entries are natural-log of floored mel power."""

    values: np.ndarray
    hop_ms: float
    win_ms: float
    n_mels: int
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != self.n_mels:
            raise ValidationError(
                f"mel matrix must be [n_frames x {self.n_mels}], got {self.values.shape}"
            )

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class MelConfig:
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    win_ms: float = 64.0
    hop_ms: float = 10.0
    n_mels: int = 80
    floor: float = MEL_FLOOR

    @property
    def framing(self) -> FramingSpec:
        return FramingSpec(self.win_ms, self.hop_ms)


def ms_to_samples(ms: float, sample_rate_hz: int) -> int:
    return int(round(ms * sample_rate_hz / 1000.0))


def frame_count(n_samples: int, spec: FramingSpec, sample_rate_hz: int) -> int:
    """Number of full frames; inputs shorter than one frame count as a single padded frame."""
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    length = spec.frame_len_samples(sample_rate_hz)
    shift = spec.frame_shift_samples(sample_rate_hz)
    if n_samples < length:
        return 1
    return 1 + (n_samples - length) // shift


def frame_signal(x: np.ndarray, length: int, shift: int) -> np.ndarray:
    """Slice x into overlapping frames [n_frames x length], zero-padding short inputs."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < length:
        padded = np.zeros(length, dtype=np.float64)
        padded[: x.size] = x
        return padded[None, :]
    n_frames = 1 + (x.size - length) // shift
    idx = shift * np.arange(n_frames)[:, None] + np.arange(length)[None, :]
    return x[idx]


@lru_cache(maxsize=8)
def _hann_periodic(length: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate_hz: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular mel filters [n_mels x (1 + n_fft//2)], peak-normalized, 0..Nyquist."""
    freqs = np.linspace(0.0, sample_rate_hz / 2.0, 1 + n_fft // 2)
    pts = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate_hz / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, freqs.size), dtype=np.float64)
    for i in range(n_mels):
        left, center, right = pts[i], pts[i + 1], pts[i + 2]
        rising = (freqs - left) / max(center - left, 1e-12)
        falling = (right - freqs) / max(right - center, 1e-12)
        fb[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


@lru_cache(maxsize=8)
def mel_center_frequencies(sample_rate_hz: int, n_mels: int) -> np.ndarray:
    """Center frequency in Hz of each mel filter."""
    pts = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate_hz / 2.0), n_mels + 2))
    return pts[1:-1]


def read_wav(path) -> Waveform:
    """Read a RIFF PCM16 mono file; samples scaled to [-1, 1] by 1/32768."""
    try:
        with wave.open(str(path), "rb") as f:
            n_channels = f.getnchannels()
            sampwidth = f.getsampwidth()
            rate = f.getframerate()
            n_frames = f.getnframes()
            data = f.readframes(n_frames)
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: not a readable RIFF/WAVE file ({exc})") from exc
    if n_channels != 1:
        raise FormatError(f"{path}: expected mono, got {n_channels} channels")
    if sampwidth != 2:
        raise FormatError(f"{path}: expected PCM16, got {8 * sampwidth}-bit samples")
    if n_frames < 1:
        raise FormatError(f"{path}: empty data chunk")
    ints = np.frombuffer(data, dtype="<i2")
    return Waveform(ints.astype(np.float64) / 32768.0, rate)


def write_wav(w: Waveform, path) -> None:
    """Write PCM16 mono. Samples are clipped to [-1, 1] before quantization.

    Quantization scales by 32768 with the positive end clipped to 32767, which
    makes write(read(f)) reproduce f's data chunk byte for byte.
    """
    clipped = np.clip(w.samples, -1.0, 1.0)
    ints = np.clip(np.rint(clipped * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate_hz)
        f.writeframes(ints.tobytes())


def stft(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Hann-windowed short-time transform on the package framing grid (no centering)."""
    frames = frame_signal(x, n_fft, hop) * _hann_periodic(n_fft)[None, :]
    return np.fft.rfft(frames, axis=1)


def istft(spec: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`; output has (T-1)*hop + n_fft samples."""
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * _hann_periodic(n_fft)[None, :]
    n_frames = frames.shape[0]
    out_len = (n_frames - 1) * hop + n_fft
    out = np.zeros(out_len, dtype=np.float64)
    wsum = np.zeros(out_len, dtype=np.float64)
    win_sq = _hann_periodic(n_fft) ** 2
    for t in range(n_frames):
        out[t * hop : t * hop + n_fft] += frames[t]
        wsum[t * hop : t * hop + n_fft] += win_sq
    return out / np.maximum(wsum, 1e-8)


def mel_spectrogram(w: Waveform, cfg: MelConfig | None = None) -> MelSpectrogram:
    """Log mel-spectrogram: Hann window, power spectrum, mel pooling, floored natural log."""
    cfg = cfg or MelConfig(sample_rate_hz=w.sample_rate_hz)
    if w.sample_rate_hz != cfg.sample_rate_hz:
        raise ValidationError(
            f"waveform rate {w.sample_rate_hz} != configured {cfg.sample_rate_hz}"
        )
    n_fft = cfg.framing.frame_len_samples(cfg.sample_rate_hz)
    hop = cfg.framing.frame_shift_samples(cfg.sample_rate_hz)
    power = np.abs(stft(w.samples, n_fft, hop)) ** 2
    fb = mel_filterbank(cfg.sample_rate_hz, n_fft, cfg.n_mels)
    mel_power = power @ fb.T
    values = np.log(np.maximum(mel_power, cfg.floor))
    return MelSpectrogram(values, cfg.hop_ms, cfg.win_ms, cfg.n_mels, cfg.sample_rate_hz)


def reconstruct_waveform(m: MelSpectrogram, iterations: int = 32) -> Waveform:
    """Approximate waveform from a log mel-spectrogram.

    The mel filterbank is pseudo-inverted to a magnitude spectrogram, then the
    phase is estimated by iterative analysis/resynthesis starting from zero
    phase. Output length is within one hop of the implied source length.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    sr = m.sample_rate_hz
    n_fft = ms_to_samples(m.win_ms, sr)
    hop = ms_to_samples(m.hop_ms, sr)
    fb = mel_filterbank(sr, n_fft, m.n_mels)
    mel_power = np.exp(m.values)
    power_spec = np.clip(mel_power @ np.linalg.pinv(fb).T, 0.0, None)
    mag = np.sqrt(power_spec)

    spec = mag.astype(np.complex128)
    for _ in range(iterations):
        x = istft(spec, n_fft, hop)
        phase = np.angle(stft(x, n_fft, hop))
        spec = mag * np.exp(1j * phase)
    return Waveform(istft(spec, n_fft, hop), sr)

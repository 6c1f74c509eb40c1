"""Latent-variable extraction from speech: content, recording quality, acoustic scene.

All three extractors are deterministic, parameter-frozen stand-ins that expose
the exact dimensions and framings of the real pretrained networks they
replace, so every downstream alignment/projection constraint is exercised at
true geometry. Externally extracted features can be substituted via the
condition-track file format ("CTRK1").
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .audio import (
    FramingSpec,
    MelConfig,
    Waveform,
    frame_count,
    frame_signal,
    mel_filterbank,
    mel_spectrogram,
    _hann_periodic,
)
from .errors import FormatError, ModeError, ValidationError

CONTENT_DIM = 256
QUALITY_DIM = 64
SCENE_DIM = 768

QUALITY_FRAMING = FramingSpec(150.0, 40.0)
SCENE_FRAMING = FramingSpec(160.0, 50.0)
CONTENT_FRAMING = FramingSpec(64.0, 10.0)  # shares the mel grid

UTTERANCE = "utterance"
FRAME = "frame"

SPECTRAL_FLOOR = 1e-5

# Seed of the frozen random projection inside the content extractor.
_CONTENT_PROJECTION_SEED = 0x5EEDC0DE


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str  # quality | scene | content
    dim: int
    framing: FramingSpec


def quality_spec() -> ExtractorSpec:
    return ExtractorSpec("quality", QUALITY_DIM, QUALITY_FRAMING)


def scene_spec() -> ExtractorSpec:
    return ExtractorSpec("scene", SCENE_DIM, SCENE_FRAMING)


def content_spec() -> ExtractorSpec:
    return ExtractorSpec("content", CONTENT_DIM, CONTENT_FRAMING)


@dataclass
class ConditionTrack:
    values: np.ndarray
    framing: FramingSpec
    extractor_id: str
    mode: str
    kind: str
    source_n_samples: int
    sample_rate_hz: int = 16000

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError("condition track must be a 2-D matrix")
        if self.mode not in (UTTERANCE, FRAME):
            raise ModeError(f"unknown mode '{self.mode}'")
        if self.mode == UTTERANCE and self.values.shape[0] != 1:
            raise ValidationError("utterance-mode track must have exactly one row")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("condition track contains non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


_content_projection_cache = {}


def _content_projection(n_mels: int) -> np.ndarray:
    if n_mels not in _content_projection_cache:
        rng = np.random.default_rng(_CONTENT_PROJECTION_SEED)
        _content_projection_cache[n_mels] = rng.standard_normal(
            (n_mels, CONTENT_DIM)
        ) / np.sqrt(n_mels)
    return _content_projection_cache[n_mels]


def extract_content(w: Waveform, mel_cfg: MelConfig | None = None) -> ConditionTrack:
    """Frame-wise content features: mel frames through a frozen random map, L2-normalized.

    Silent (all-floor) frames map to the zero vector.
    """
    cfg = mel_cfg or MelConfig(sample_rate_hz=w.sample_rate_hz)
    mel = mel_spectrogram(w, cfg)
    floor_value = np.log(cfg.floor)
    silent = np.all(mel.values <= floor_value + 1e-12, axis=1)
    x = mel.values @ _content_projection(cfg.n_mels)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = np.where(norms > 1e-12, x / np.maximum(norms, 1e-12), 0.0)
    x[silent] = 0.0
    return ConditionTrack(
        x,
        FramingSpec(cfg.win_ms, cfg.hop_ms),
        extractor_id="standin-content",
        mode=FRAME,
        kind="content",
        source_n_samples=w.samples.size,
        sample_rate_hz=w.sample_rate_hz,
    )


def _check_mode(mode: str) -> None:
    if mode not in (UTTERANCE, FRAME):
        raise ModeError(f"mode must be '{UTTERANCE}' or '{FRAME}', got '{mode}'")


def _collapse(values: np.ndarray, mode: str) -> np.ndarray:
    # Utterance reduction is the uniform average of the frame-wise rows.
    if mode == UTTERANCE:
        return values.mean(axis=0, keepdims=True)
    return values


def extract_quality(w: Waveform, mode: str = UTTERANCE) -> ConditionTrack:
    """Recording-quality features per 150 ms / 40 ms frame, 64 dims.

    Layout: [log RMS energy, zero-crossing rate, spectral flatness, normalized
    spectral centroid, 60 log mel-band energies].
    """
    _check_mode(mode)
    sr = w.sample_rate_hz
    length = QUALITY_FRAMING.frame_len_samples(sr)
    shift = QUALITY_FRAMING.frame_shift_samples(sr)
    frames = frame_signal(w.samples, length, shift)
    win = _hann_periodic(length)
    power = np.abs(np.fft.rfft(frames * win[None, :], axis=1)) ** 2

    rms = np.sqrt(np.mean(frames**2, axis=1))
    log_rms = np.log(np.maximum(rms, SPECTRAL_FLOOR))
    signs = frames >= 0.0
    zcr = np.mean(signs[:, 1:] != signs[:, :-1], axis=1)
    eps = 1e-12
    flatness = np.exp(np.mean(np.log(power + eps), axis=1)) / (np.mean(power, axis=1) + eps)
    freqs = np.linspace(0.0, sr / 2.0, power.shape[1])
    centroid = (power @ freqs) / (np.sum(power, axis=1) + eps) / (sr / 2.0)

    fb = mel_filterbank(sr, length, 60)
    bands = np.log(np.maximum(power @ fb.T, SPECTRAL_FLOOR))

    values = np.column_stack([log_rms, zcr, flatness, centroid, bands])
    return ConditionTrack(
        _collapse(values, mode),
        QUALITY_FRAMING,
        extractor_id="standin-quality",
        mode=mode,
        kind="quality",
        source_n_samples=w.samples.size,
        sample_rate_hz=sr,
    )


def extract_scene(w: Waveform, mode: str = UTTERANCE) -> ConditionTrack:
    """Acoustic-scene features per 160 ms / 50 ms frame: 768-bin log magnitude spectrum.

    Each frame's central 2048 samples are windowed and transformed; the lowest
    768 linear-frequency bins are kept, floored, and log-compressed.
    """
    _check_mode(mode)
    sr = w.sample_rate_hz
    length = SCENE_FRAMING.frame_len_samples(sr)
    shift = SCENE_FRAMING.frame_shift_samples(sr)
    n_fft = 2048
    frames = frame_signal(w.samples, length, shift)
    if length > n_fft:
        start = (length - n_fft) // 2
        frames = frames[:, start : start + n_fft]
    else:
        frames = np.pad(frames, ((0, 0), (0, n_fft - length)))
    mag = np.abs(np.fft.rfft(frames * _hann_periodic(n_fft)[None, :], axis=1))
    values = np.log(np.maximum(mag[:, :SCENE_DIM], SPECTRAL_FLOOR))
    return ConditionTrack(
        _collapse(values, mode),
        SCENE_FRAMING,
        extractor_id="standin-scene",
        mode=mode,
        kind="scene",
        source_n_samples=w.samples.size,
        sample_rate_hz=sr,
    )


# ---------------------------------------------------------------------------
# Condition-track file format ("CTRK1"): magic, JSON header, float32 LE matrix
# ---------------------------------------------------------------------------

_MAGIC = b"CTRK1"


def save_condition_track(track: ConditionTrack, path) -> None:
    header = {
        "extractor_id": track.extractor_id,
        "kind": track.kind,
        "dim": track.dim,
        "frame_len_ms": track.framing.frame_len_ms,
        "frame_shift_ms": track.framing.frame_shift_ms,
        "n_frames": track.n_frames,
        "source_n_samples": track.source_n_samples,
        "mode": track.mode,
        "sample_rate_hz": track.sample_rate_hz,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(track.values.astype("<f4").tobytes(order="C"))


def load_condition_file(path, expected: ExtractorSpec) -> ConditionTrack:
    """Read and validate a condition-track file against the expected extractor geometry."""
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        (header_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(header_len).decode("utf-8"))
        data = f.read()

    dim = int(header["dim"])
    n_frames = int(header["n_frames"])
    if dim != expected.dim:
        raise ValidationError(f"{path}: dim {dim} != expected {expected.dim}")
    if header["kind"] != expected.kind:
        raise ValidationError(f"{path}: kind '{header['kind']}' != expected '{expected.kind}'")
    framing = FramingSpec(float(header["frame_len_ms"]), float(header["frame_shift_ms"]))
    if framing != expected.framing:
        raise ValidationError(
            f"{path}: framing {framing} != expected {expected.framing}"
        )
    values = np.frombuffer(data, dtype="<f4")
    if values.size != n_frames * dim:
        raise ValidationError(
            f"{path}: matrix holds {values.size} floats, header implies {n_frames * dim}"
        )
    values = values.reshape(n_frames, dim).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{path}: matrix contains non-finite entries")

    mode = header["mode"]
    source_n_samples = int(header["source_n_samples"])
    sr = int(header.get("sample_rate_hz", 16000))
    if mode == FRAME:
        want = frame_count(source_n_samples, framing, sr)
        if n_frames != want:
            raise ValidationError(
                f"{path}: {n_frames} frames inconsistent with source length "
                f"{source_n_samples} (expected {want})"
            )
    elif mode == UTTERANCE:
        if n_frames != 1:
            raise ValidationError(f"{path}: utterance-mode file must hold one row")
    else:
        raise ValidationError(f"{path}: unknown mode '{mode}'")

    return ConditionTrack(
        values, framing, header["extractor_id"], mode, header["kind"],
        source_n_samples, sr,
    )

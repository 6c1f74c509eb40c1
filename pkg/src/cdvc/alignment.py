"""Aligning condition tracks to the content frame grid and model feature width.

Utterance-wise tracks are replicated across frames; frame-wise tracks are
upsampled by nearest-frame-center mapping. After alignment the quality and
scene tracks are linearly projected to the content width (256) and
concatenated with the content features along the feature axis, giving the
source-encoder input of width 3 x 256.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .conditioning import CONTENT_DIM, FRAME, UTTERANCE, ConditionTrack
from .errors import ModeError, ShapeError


def replicate_utterance(track: ConditionTrack, n_frames: int) -> np.ndarray:
    """Repeat the single utterance-wise row n_frames times."""
    if track.mode != UTTERANCE:
        raise ModeError("replicate_utterance requires an utterance-mode track")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    return np.repeat(track.values, n_frames, axis=0)


def upsample_indices(
    n_out: int,
    content_hop_ms: float,
    frame_len_ms: float,
    frame_shift_ms: float,
    n_in: int,
) -> np.ndarray:
    """Nearest source frame (by time center) for each content frame, clamped to range."""
    t = np.arange(n_out, dtype=np.float64)
    centers = t * content_hop_ms + content_hop_ms / 2.0
    k = np.floor((centers - frame_len_ms / 2.0) / frame_shift_ms + 0.5)
    return np.clip(k, 0, n_in - 1).astype(np.int64)


def upsample_framewise(
    track: ConditionTrack, n_frames: int, content_hop_ms: float = 10.0
) -> np.ndarray:
    """Map a frame-wise track onto n_frames content frames by nearest time center."""
    if track.mode != FRAME:
        raise ModeError("upsample_framewise requires a frame-mode track")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    idx = upsample_indices(
        n_frames,
        content_hop_ms,
        track.framing.frame_len_ms,
        track.framing.frame_shift_ms,
        track.n_frames,
    )
    return track.values[idx]


def align_condition(
    track: ConditionTrack, n_frames: int, content_hop_ms: float = 10.0
) -> np.ndarray:
    if track.mode == UTTERANCE:
        return replicate_utterance(track, n_frames)
    return upsample_framewise(track, n_frames, content_hop_ms)


class ConditionProjector(nn.Module):
    """Trainable linear maps taking quality (64) and scene (768) tracks to width 256."""

    def __init__(self, quality_dim: int, scene_dim: int, out_dim: int = CONTENT_DIM):
        super().__init__()
        self.quality = nn.Linear(quality_dim, out_dim)
        self.scene = nn.Linear(scene_dim, out_dim)

    def forward(self, quality_aligned, scene_aligned):
        return self.quality(quality_aligned), self.scene(scene_aligned)


def project_and_concat(
    content: torch.Tensor,
    quality_aligned: torch.Tensor,
    scene_aligned: torch.Tensor,
    projector: ConditionProjector,
) -> torch.Tensor:
    """Concatenate content with the projected condition tracks along features."""
    if not (content.shape[:-1] == quality_aligned.shape[:-1] == scene_aligned.shape[:-1]):
        raise ShapeError(
            f"frame counts differ: {content.shape}, {quality_aligned.shape}, "
            f"{scene_aligned.shape}"
        )
    if quality_aligned.shape[-1] != projector.quality.in_features:
        raise ShapeError(
            f"quality dim {quality_aligned.shape[-1]} != {projector.quality.in_features}"
        )
    if scene_aligned.shape[-1] != projector.scene.in_features:
        raise ShapeError(
            f"scene dim {scene_aligned.shape[-1]} != {projector.scene.in_features}"
        )
    q, s = projector(quality_aligned, scene_aligned)
    return torch.cat([content, q, s], dim=-1)

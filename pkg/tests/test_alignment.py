import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cdvc.alignment import (
    ConditionProjector,
    align_condition,
    project_and_concat,
    replicate_utterance,
    upsample_framewise,
    upsample_indices,
)
from cdvc.audio import Waveform
from cdvc.conditioning import (
    FRAME,
    QUALITY_FRAMING,
    SCENE_FRAMING,
    UTTERANCE,
    ConditionTrack,
    extract_quality,
    extract_scene,
)
from cdvc.errors import ModeError, ShapeError

SR = 16000


def frame_track(values, framing=QUALITY_FRAMING):
    n = values.shape[0]
    # source length consistent with n frames of this framing
    length = framing.frame_len_samples(SR) + (n - 1) * framing.frame_shift_samples(SR)
    return ConditionTrack(values, framing, "t", FRAME, "quality", length)


class TestReplication:
    def test_replicates_single_row(self):
        track = ConditionTrack(
            np.array([[1.0, 2.0, 3.0]]), QUALITY_FRAMING, "t", UTTERANCE, "quality", SR
        )
        out = replicate_utterance(track, 5)
        assert out.shape == (5, 3)
        np.testing.assert_array_equal(out, np.tile([1.0, 2.0, 3.0], (5, 1)))

    def test_rejects_frame_mode(self):
        track = frame_track(np.zeros((4, 3)))
        with pytest.raises(ModeError):
            replicate_utterance(track, 5)

    def test_rejects_zero_frames(self):
        track = ConditionTrack(
            np.ones((1, 2)), QUALITY_FRAMING, "t", UTTERANCE, "quality", SR
        )
        with pytest.raises(ValueError):
            replicate_utterance(track, 0)


class TestUpsampleIndices:
    def test_monotone_and_in_range(self):
        idx = upsample_indices(94, 10.0, 150.0, 40.0, 22)
        assert idx.shape == (94,)
        assert np.all(np.diff(idx) >= 0)
        assert idx[0] == 0
        assert idx[-1] == 21

    def test_nearest_center_oracle(self):
        # content frame centers: 5, 15, 25, ... ms
        # source frames (150/40): centers at 75, 115, 155, ... ms
        # exact midpoints round to the later source frame
        idx = upsample_indices(30, 10.0, 150.0, 40.0, 22)
        centers = np.arange(30) * 10.0 + 5.0
        src_centers = 75.0 + 40.0 * np.arange(22)
        dist = np.abs(centers[:, None] - src_centers[None, :])
        dist -= 1e-9 * np.arange(22)[None, :]  # bias ties toward the later frame
        expected = np.argmin(dist, axis=1)
        np.testing.assert_array_equal(idx, expected)

    @given(
        st.integers(1, 200),
        st.integers(1, 40),
        st.sampled_from([(150.0, 40.0), (160.0, 50.0), (64.0, 10.0)]),
    )
    @settings(max_examples=60, deadline=None)
    def test_always_valid_indices(self, n_out, n_in, geometry):
        length_ms, shift_ms = geometry
        idx = upsample_indices(n_out, 10.0, length_ms, shift_ms, n_in)
        assert idx.min() >= 0
        assert idx.max() <= n_in - 1
        assert np.all(np.diff(idx) >= 0)

    def test_every_source_frame_used_when_grid_is_finer(self):
        # 10 ms content hop against a 40 ms source shift: 4 content frames per
        # source frame, so no source row should be skipped
        idx = upsample_indices(94, 10.0, 150.0, 40.0, 22)
        assert set(idx.tolist()) == set(range(22))


class TestUpsampleFramewise:
    def test_rows_come_from_source(self):
        values = np.arange(12.0).reshape(4, 3)
        track = frame_track(values)
        out = upsample_framewise(track, 20)
        assert out.shape == (20, 3)
        for row in out:
            assert any(np.array_equal(row, src) for src in values)

    def test_rejects_utterance_mode(self):
        track = ConditionTrack(
            np.ones((1, 2)), QUALITY_FRAMING, "t", UTTERANCE, "quality", SR
        )
        with pytest.raises(ModeError):
            upsample_framewise(track, 4)

    def test_single_source_frame_replicates(self):
        track = frame_track(np.array([[1.0, 2.0]]))
        out = upsample_framewise(track, 7)
        np.testing.assert_array_equal(out, np.tile([1.0, 2.0], (7, 1)))


class TestAlignCondition:
    def test_dispatches_by_mode(self):
        w = Waveform(0.3 * np.sin(2 * np.pi * 440 * np.arange(SR) / SR), SR)
        uw = align_condition(extract_quality(w, UTTERANCE), 94)
        fw = align_condition(extract_quality(w, FRAME), 94)
        assert uw.shape == fw.shape == (94, 64)
        # replication repeats one row; upsampling tracks local change
        assert np.unique(uw, axis=0).shape[0] == 1
        assert np.unique(fw, axis=0).shape[0] > 1

    def test_scene_alignment_geometry(self):
        w = Waveform(0.1 * np.random.default_rng(0).standard_normal(SR), SR)
        fw = align_condition(extract_scene(w, FRAME), 94)
        assert fw.shape == (94, 768)
        assert SCENE_FRAMING.frame_shift_ms == 50.0


class TestProjection:
    def test_output_width_is_three_times_content(self):
        proj = ConditionProjector(64, 768, out_dim=256)
        content = torch.zeros(10, 256)
        q = torch.zeros(10, 64)
        s = torch.zeros(10, 768)
        out = project_and_concat(content, q, s, proj)
        assert out.shape == (10, 768)

    def test_content_passes_through_unchanged(self):
        proj = ConditionProjector(64, 768)
        content = torch.randn(6, 256)
        out = project_and_concat(content, torch.zeros(6, 64), torch.zeros(6, 768), proj)
        torch.testing.assert_close(out[:, :256], content)

    def test_frame_count_mismatch_rejected(self):
        proj = ConditionProjector(64, 768)
        with pytest.raises(ShapeError):
            project_and_concat(
                torch.zeros(10, 256), torch.zeros(9, 64), torch.zeros(10, 768), proj
            )

    def test_wrong_quality_dim_rejected(self):
        proj = ConditionProjector(64, 768)
        with pytest.raises(ShapeError):
            project_and_concat(
                torch.zeros(4, 256), torch.zeros(4, 65), torch.zeros(4, 768), proj
            )

    def test_batched_inputs_supported(self):
        proj = ConditionProjector(64, 768)
        out = project_and_concat(
            torch.zeros(2, 10, 256), torch.zeros(2, 10, 64), torch.zeros(2, 10, 768), proj
        )
        assert out.shape == (2, 10, 768)

    def test_projector_is_trainable(self):
        proj = ConditionProjector(64, 768)
        out = project_and_concat(
            torch.zeros(3, 256), torch.randn(3, 64), torch.randn(3, 768), proj
        )
        out.sum().backward()
        assert proj.quality.weight.grad is not None
        assert proj.scene.weight.grad is not None

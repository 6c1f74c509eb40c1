import os
from pathlib import Path

import numpy as np
import pytest
import torch

from cdvc.audio import MelConfig, Waveform, mel_spectrogram, read_wav
from cdvc.corpus import generate_corpus, read_manifest
from cdvc.degradation import SnrSpec, measure_snr, synthesize_noise_bank
from cdvc.errors import ConfigError, DegenerateInputError, ValidationError
from cdvc.model import ModelConfig, VcModel
from cdvc.training import (
    FitConfig,
    OptimizerConfig,
    Trainer,
    TrainingPair,
    build_pair,
    collate,
    convert,
    fit,
    pair_item,
    training_step,
)

SMALL = dict(d_model=16, n_heads=4, n_enc_blocks=1, n_dec_blocks=1)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    paths = generate_corpus(root, n_speakers=4, n_utts_per_speaker=2,
                            split_spec=(0.5, 0.25, 0.25), seed=11,
                            tokens_per_utt=(3, 4))
    return paths


@pytest.fixture(scope="module")
def banks():
    train = synthesize_noise_bank("filtered", 3, duration_s=0.6, seed=11)
    unseen = synthesize_noise_bank("modulated", 3, duration_s=0.6, seed=11)
    return train, unseen


def clean_wave(corpus, split="train", index=0):
    return read_wav(read_manifest(corpus[split])[index].wav_path)


class TestConfigs:
    def test_negative_lr_rejected(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(lr=-1e-4)

    def test_zero_lr_allowed(self):
        assert OptimizerConfig(lr=0.0).lr == 0.0

    def test_beta_range(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(beta2=1.0)

    def test_unknown_schedule(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(lr_schedule="linear")

    def test_fit_snr_order(self):
        with pytest.raises(ConfigError):
            FitConfig(snr_low_db=10.0, snr_high_db=0.0)

    def test_fit_positive_steps(self):
        with pytest.raises(ConfigError):
            FitConfig(max_steps=0)


class TestBuildPair:
    def test_lengths_and_target(self, corpus, banks):
        clean = clean_wave(corpus)
        rng = np.random.default_rng(0)
        pair = build_pair(clean, banks[0], SnrSpec(0.0, 20.0), rng)
        assert pair.noisy_source.samples.size == clean.samples.size
        assert 0.0 <= pair.snr_db <= 20.0
        assert pair.noise_id in banks[0].ids()
        # ground-truth mel belongs to the clean signal
        np.testing.assert_array_equal(
            pair.ground_truth_mel.values, mel_spectrogram(clean).values
        )

    def test_mixture_hits_sampled_snr(self, corpus, banks):
        clean = clean_wave(corpus)
        pair = build_pair(clean, banks[0], SnrSpec(5.0, 5.0), np.random.default_rng(1))
        residual = Waveform(pair.noisy_source.samples - clean.samples, clean.sample_rate_hz)
        assert measure_snr(clean, residual) == pytest.approx(5.0, abs=1e-6)

    def test_silent_clean_rejected(self, banks):
        with pytest.raises(DegenerateInputError):
            build_pair(Waveform(np.zeros(8000)), banks[0], SnrSpec(0, 20),
                       np.random.default_rng(0))

    def test_pair_length_mismatch_rejected(self):
        a = Waveform(0.1 * np.ones(8000))
        b = Waveform(0.1 * np.ones(4000))
        with pytest.raises(ValidationError):
            TrainingPair(a, b, mel_spectrogram(b), 0.0, "n")


class TestBatching:
    def test_collate_masks_and_padding(self, corpus, banks):
        cfg = ModelConfig(**SMALL, variant="fw-fw")
        rng = np.random.default_rng(2)
        items = [
            pair_item(cfg, build_pair(clean_wave(corpus, index=i), banks[0],
                                      SnrSpec(0, 20), rng))
            for i in range(2)
        ]
        batch = collate(items)
        lengths = sorted(i["content"].shape[0] for i in items)
        assert batch["content"].shape[1] == lengths[-1]
        assert batch["src_mask"].sum() == sum(lengths)
        for key in ("content", "quality", "scene", "target_mel"):
            assert key in batch
        # padded rows are zero
        short = min(range(2), key=lambda b: items[b]["content"].shape[0])
        t_short = items[short]["content"].shape[0]
        if t_short < lengths[-1]:
            assert batch["content"][short, t_short:].abs().max() == 0.0

    def test_unconditioned_items_skip_condition_tracks(self, corpus, banks):
        cfg = ModelConfig(**SMALL)
        item = pair_item(cfg, build_pair(clean_wave(corpus), banks[0],
                                         SnrSpec(0, 20), np.random.default_rng(3)))
        assert "quality" not in item
        assert "scene" not in item


class TestOptimizerStep:
    def test_zero_lr_leaves_parameters_unchanged(self, corpus, banks):
        cfg = ModelConfig(**SMALL)
        trainer = Trainer(VcModel(cfg, seed=0), OptimizerConfig(lr=0.0))
        before = {k: v.clone() for k, v in trainer.model.state_dict().items()}
        pair = build_pair(clean_wave(corpus), banks[0], SnrSpec(0, 20),
                          np.random.default_rng(4))
        training_step(trainer, [pair])
        for k, v in trainer.model.state_dict().items():
            assert torch.equal(before[k], v), k

    def test_zero_grad_update_is_pure_decay(self):
        cfg = ModelConfig(**SMALL)
        opt_cfg = OptimizerConfig(lr=1e-2, weight_decay=0.1)
        trainer = Trainer(VcModel(cfg, seed=0), opt_cfg)
        before = trainer.model.head.weight.detach().clone()
        for p in trainer.model.parameters():
            p.grad = torch.zeros_like(p)
        trainer.optimizer.step()
        after = trainer.model.head.weight.detach()
        torch.testing.assert_close(after, before * (1.0 - 1e-2 * 0.1))

    def test_loss_decreases_on_repeated_pair(self, corpus, banks):
        cfg = ModelConfig(**SMALL)
        trainer = Trainer(VcModel(cfg, seed=0), OptimizerConfig(lr=2e-3, weight_decay=0.0))
        pair = build_pair(clean_wave(corpus), banks[0], SnrSpec(10, 10),
                          np.random.default_rng(5))
        batch = collate([pair_item(cfg, pair)])
        losses = [float(trainer.step(batch).value) for _ in range(120)]
        assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])

    def test_step_counts(self, corpus, banks):
        cfg = ModelConfig(**SMALL)
        trainer = Trainer(VcModel(cfg, seed=0))
        pair = build_pair(clean_wave(corpus), banks[0], SnrSpec(0, 20),
                          np.random.default_rng(6))
        training_step(trainer, [pair])
        training_step(trainer, [pair])
        assert trainer.step_count == 2

    def test_cosine_schedule_requires_horizon(self):
        cfg = ModelConfig(**SMALL)
        with pytest.raises(ConfigError):
            Trainer(VcModel(cfg, seed=0), OptimizerConfig(lr_schedule="cosine"))

    def test_cosine_schedule_anneals(self, corpus, banks):
        cfg = ModelConfig(**SMALL)
        trainer = Trainer(VcModel(cfg, seed=0),
                          OptimizerConfig(lr=1e-3, lr_schedule="cosine"),
                          schedule_steps=10)
        pair = build_pair(clean_wave(corpus), banks[0], SnrSpec(0, 20),
                          np.random.default_rng(7))
        batch = collate([pair_item(cfg, pair)])
        for _ in range(10):
            trainer.step(batch)
        assert trainer.optimizer.param_groups[0]["lr"] == pytest.approx(0.0, abs=1e-12)


class TestFit:
    def _fit(self, corpus, banks, run_dir, variant="none-none", steps=12, seed=0,
             resume=False, **fit_kw):
        return fit(
            corpus["train"], corpus["valid"], banks[0], banks[1], run_dir,
            model_cfg=ModelConfig(**SMALL, variant=variant),
            opt_cfg=OptimizerConfig(lr=1e-3, batch_size=2),
            fit_cfg=FitConfig(seed=seed, max_steps=steps, validate_every=4,
                              patience=50, **fit_kw),
            resume=resume,
        )

    def test_metrics_are_bit_identical_across_runs(self, corpus, banks, tmp_path):
        r1 = self._fit(corpus, banks, tmp_path / "a")
        r2 = self._fit(corpus, banks, tmp_path / "b")
        m1 = Path(r1.metrics_path).read_bytes()
        m2 = Path(r2.metrics_path).read_bytes()
        assert m1 == m2
        assert len(m1.splitlines()) == 1 + 3  # header + one row per validation

    def test_metrics_columns(self, corpus, banks, tmp_path):
        r = self._fit(corpus, banks, tmp_path / "m")
        header = Path(r.metrics_path).read_text().splitlines()[0].split()
        assert header == ["step", "train_loss", "valid_loss", "unseen_valid_loss"]
        assert os.path.exists(r.timing_path)

    def test_best_checkpoint_no_worse_than_last(self, corpus, banks, tmp_path):
        from cdvc.model import load_checkpoint

        r = self._fit(corpus, banks, tmp_path / "c", steps=20)
        best = load_checkpoint(r.checkpoint_path)
        assert best["meta"]["best_valid_loss"] == pytest.approx(r.best_valid_loss)
        rows = [line.split("\t") for line in Path(r.metrics_path).read_text().splitlines()[1:]]
        final_valid = float(rows[-1][2])
        assert r.best_valid_loss <= final_valid + 1e-12

    def test_checkpoint_meta_records_train_speakers(self, corpus, banks, tmp_path):
        from cdvc.model import load_checkpoint

        r = self._fit(corpus, banks, tmp_path / "d")
        meta = load_checkpoint(r.checkpoint_path)["meta"]
        expected = sorted({u.speaker_id for u in read_manifest(corpus["train"])})
        assert meta["train_speakers"] == expected

    def test_early_stop_on_stalled_validation(self, corpus, banks, tmp_path):
        r = fit(
            corpus["train"], corpus["valid"], banks[0], banks[1], tmp_path / "e",
            model_cfg=ModelConfig(**SMALL),
            opt_cfg=OptimizerConfig(lr=0.0, batch_size=2),
            fit_cfg=FitConfig(seed=0, max_steps=200, validate_every=2, patience=3),
        )
        assert r.stopped_early
        assert r.final_step < 200

    def test_resume_continues_step_count(self, corpus, banks, tmp_path):
        run = tmp_path / "f"
        r1 = self._fit(corpus, banks, run, steps=8)
        assert r1.final_step == 8
        r2 = self._fit(corpus, banks, run, steps=16, resume=True)
        assert r2.final_step == 16
        rows = Path(r2.metrics_path).read_text().splitlines()
        assert rows[0].startswith("step")
        steps = [int(line.split("\t")[0]) for line in rows[1:]]
        assert steps == sorted(steps)
        assert steps[0] == 4 and steps[-1] == 16

    def test_resume_rejects_config_change(self, corpus, banks, tmp_path):
        run = tmp_path / "g"
        self._fit(corpus, banks, run, steps=8)
        with pytest.raises(ValidationError):
            self._fit(corpus, banks, run, variant="uw-uw", steps=16, resume=True)

    def test_speaker_overlap_rejected(self, corpus, banks, tmp_path):
        with pytest.raises(ValidationError):
            fit(corpus["train"], corpus["train"], banks[0], banks[1], tmp_path / "h",
                model_cfg=ModelConfig(**SMALL))


class TestConvert:
    def test_convert_writes_audio(self, corpus, banks, tmp_path):
        r = fit(corpus["train"], corpus["valid"], banks[0], banks[1], tmp_path / "r",
                model_cfg=ModelConfig(**SMALL, variant="uw-uw"),
                opt_cfg=OptimizerConfig(lr=1e-3, batch_size=2),
                fit_cfg=FitConfig(seed=0, max_steps=4, validate_every=4, patience=5))
        src = read_manifest(corpus["eval"])[0]
        tgt = read_manifest(corpus["valid"])[0]
        mel, out = convert(r.checkpoint_path, src.wav_path, tgt.wav_path,
                           gl_iterations=4)
        assert out.sample_rate_hz == 16000
        src_wave = read_wav(src.wav_path)
        assert mel.n_frames == mel_spectrogram(src_wave).n_frames
        # within one window of the source duration
        assert abs(out.samples.size - src_wave.samples.size) <= 1024

    def test_variant_mismatch_rejected(self, corpus, banks, tmp_path):
        r = fit(corpus["train"], corpus["valid"], banks[0], banks[1], tmp_path / "s",
                model_cfg=ModelConfig(**SMALL, variant="uw-uw"),
                opt_cfg=OptimizerConfig(lr=1e-3, batch_size=2),
                fit_cfg=FitConfig(seed=0, max_steps=4, validate_every=4, patience=5))
        src = read_manifest(corpus["eval"])[0]
        tgt = read_manifest(corpus["valid"])[0]
        with pytest.raises(ValidationError):
            convert(r.checkpoint_path, src.wav_path, tgt.wav_path, variant="fw-fw")

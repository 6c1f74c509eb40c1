"""Denoising training loop: pseudo-noisy source against its own clean mel target.

Each pair mixes seeded noise into a clean utterance; the clean utterance also
serves as the conversion target, so the model learns to reconstruct clean
speech from degraded inputs. Validation runs on two frozen pair sets, one
drawn from the training noise bank and one from a held-out bank, so the
metrics log tracks generalization to unseen noise alongside the stopping
criterion.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .alignment import align_condition
from .audio import MelConfig, MelSpectrogram, Waveform, mel_spectrogram, read_wav, reconstruct_waveform
from .conditioning import extract_content, extract_quality, extract_scene
from .corpus import read_manifest
from .degradation import NoiseBank, SnrSpec, draw_noise, mix, sample_snr
from .errors import ConfigError, DegenerateInputError, NumericError, ValidationError
from .model import (
    LossValue,
    ModelConfig,
    VcModel,
    batch_loss,
    batch_source_features,
    model_from_checkpoint,
    pair_losses,
    save_checkpoint,
)


@dataclass
class TrainingPair:
    noisy_source: Waveform
    clean: Waveform
    ground_truth_mel: MelSpectrogram
    snr_db: float
    noise_id: str

    def __post_init__(self):
        if self.noisy_source.samples.size != self.clean.samples.size:
            raise ValidationError("noisy source and clean lengths differ")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    eps: float = 1e-8
    batch_size: int = 6
    lr_schedule: str = "constant"  # or "cosine" (anneals to 0 over max_steps)

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}", field="lr")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {b}", field=name)
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0", field="weight_decay")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field="batch_size")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(
                f"lr_schedule must be 'constant' or 'cosine', got '{self.lr_schedule}'",
                field="lr_schedule",
            )


@dataclass(frozen=True)
class FitConfig:
    seed: int = 0
    max_steps: int = 2000
    validate_every: int = 50
    patience: int = 10
    min_delta: float = 1e-4
    snr_low_db: float = 0.0
    snr_high_db: float = 20.0
    resample_noise_each_epoch: bool = True

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1", field="max_steps")
        if self.validate_every < 1:
            raise ConfigError("validate_every must be >= 1", field="validate_every")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1", field="patience")
        if self.snr_low_db > self.snr_high_db:
            raise ConfigError(
                f"snr_low_db {self.snr_low_db} exceeds snr_high_db {self.snr_high_db}",
                field="snr_low_db",
            )

    @property
    def snr_spec(self) -> SnrSpec:
        return SnrSpec(self.snr_low_db, self.snr_high_db)


@dataclass
class FitResult:
    checkpoint_path: str
    last_checkpoint_path: str
    metrics_path: str
    timing_path: str
    best_step: int
    best_valid_loss: float
    best_unseen_valid_loss: float
    final_step: int
    stopped_early: bool
    step_losses: list = field(default_factory=list)


def build_pair(
    clean: Waveform,
    bank: NoiseBank,
    snr_spec: SnrSpec,
    rng: np.random.Generator,
    mel_cfg: MelConfig | None = None,
) -> TrainingPair:
    if clean.rms() == 0.0:
        raise DegenerateInputError("clean utterance is silent")
    noise_id, noise = draw_noise(bank, rng)
    snr_db = sample_snr(snr_spec, rng)
    noisy = mix(clean, noise, snr_db, rng)
    return TrainingPair(noisy, clean, mel_spectrogram(clean, mel_cfg), snr_db, noise_id)


# ---------------------------------------------------------------------------
# Feature preparation and batching
# ---------------------------------------------------------------------------

def source_tracks(cfg: ModelConfig, wave: Waveform, mel_cfg: MelConfig | None = None) -> dict:
    """Aligned numpy feature tracks for one source waveform, keyed like a batch."""
    content = extract_content(wave, mel_cfg)
    out = {"content": content.values}
    if cfg.conditioned:
        t = content.n_frames
        quality = extract_quality(wave, cfg.quality_mode)
        scene = extract_scene(wave, cfg.scene_mode)
        out["quality"] = align_condition(quality, t)
        out["scene"] = align_condition(scene, t)
    return out


def pair_item(cfg: ModelConfig, pair: TrainingPair, mel_cfg: MelConfig | None = None) -> dict:
    """All tensors the loss needs for one pair; target content comes from the clean side."""
    item = {k: torch.from_numpy(v).float() for k, v in
            source_tracks(cfg, pair.noisy_source, mel_cfg).items()}
    target_content = extract_content(pair.clean, mel_cfg)
    if target_content.n_frames != pair.ground_truth_mel.n_frames:
        raise ValidationError("content and mel frame counts disagree on the clean side")
    item["target_content"] = torch.from_numpy(target_content.values).float()
    item["target_mel"] = torch.from_numpy(pair.ground_truth_mel.values).float()
    return item


def collate(items: list) -> dict:
    """Pad items to common frame counts; boolean masks mark valid frames."""
    n = len(items)
    t_src = max(i["content"].shape[0] for i in items)
    t_tgt = max(i["target_content"].shape[0] for i in items)
    batch = {
        "src_mask": torch.zeros(n, t_src, dtype=torch.bool),
        "tgt_mask": torch.zeros(n, t_tgt, dtype=torch.bool),
    }
    for key in items[0]:
        t_pad = t_tgt if key == "target_content" else t_src
        dim = items[0][key].shape[1]
        batch[key] = torch.zeros(n, t_pad, dim)
    for b, item in enumerate(items):
        ts = item["content"].shape[0]
        tt = item["target_content"].shape[0]
        batch["src_mask"][b, :ts] = True
        batch["tgt_mask"][b, :tt] = True
        for key, value in item.items():
            batch[key][b, : value.shape[0]] = value
    return batch


# ---------------------------------------------------------------------------
# Optimizer stepping
# ---------------------------------------------------------------------------

class Trainer:
    """Owns the model and its decoupled-weight-decay Adam state."""

    def __init__(self, model: VcModel, opt_cfg: OptimizerConfig | None = None,
                 schedule_steps: int | None = None, start_step: int = 0):
        self.model = model
        self.opt_cfg = opt_cfg or OptimizerConfig()
        self.optimizer = torch.optim.AdamW(
            model.parameters(),
            lr=self.opt_cfg.lr,
            betas=(self.opt_cfg.beta1, self.opt_cfg.beta2),
            eps=self.opt_cfg.eps,
            weight_decay=self.opt_cfg.weight_decay,
        )
        self.step_count = start_step
        self.scheduler = None
        if self.opt_cfg.lr_schedule == "cosine":
            if schedule_steps is None:
                raise ConfigError("cosine schedule needs schedule_steps",
                                  field="lr_schedule")
            for group in self.optimizer.param_groups:
                group["initial_lr"] = self.opt_cfg.lr
            self.scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
                self.optimizer, T_max=schedule_steps, last_epoch=start_step - 1
            )

    def step(self, batch: dict) -> LossValue:
        """One update; a non-finite loss aborts before any parameter changes."""
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        loss = batch_loss(self.model, batch)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at step {self.step_count}")
        loss.backward()
        self.optimizer.step()
        if self.scheduler is not None:
            self.scheduler.step()
        self.step_count += 1
        return LossValue(float(loss.detach()), int(batch["src_mask"].sum()))

    # Optimizer moments ride along in the checkpoint under an "opt." prefix so
    # a run can resume mid-descent.

    def moment_tensors(self) -> dict:
        out = {}
        for name, p in self.model.named_parameters():
            state = self.optimizer.state.get(p)
            if not state:
                continue
            out[f"opt.exp_avg.{name}"] = state["exp_avg"]
            out[f"opt.exp_avg_sq.{name}"] = state["exp_avg_sq"]
            out[f"opt.step.{name}"] = state["step"]
        return out

    def load_moments(self, tensors: dict) -> None:
        for name, p in self.model.named_parameters():
            key = f"opt.exp_avg.{name}"
            if key not in tensors:
                continue
            self.optimizer.state[p] = {
                "step": torch.from_numpy(tensors[f"opt.step.{name}"]).float().reshape(()),
                "exp_avg": torch.from_numpy(tensors[key]).float().clone(),
                "exp_avg_sq": torch.from_numpy(tensors[f"opt.exp_avg_sq.{name}"]).float().clone(),
            }

    def save(self, path, seed: int, meta: dict | None = None) -> None:
        save_checkpoint(path, self.model, self.step_count, seed,
                        extra_tensors=self.moment_tensors(), meta=meta)

    @classmethod
    def load(cls, path, opt_cfg: OptimizerConfig | None = None,
             schedule_steps: int | None = None) -> "Trainer":
        model, ckpt = model_from_checkpoint(path)
        trainer = cls(model, opt_cfg, schedule_steps=schedule_steps,
                      start_step=ckpt["step"])
        trainer.load_moments(ckpt["tensors"])
        return trainer


def training_step(trainer: Trainer, pairs: list, mel_cfg: MelConfig | None = None) -> LossValue:
    if not pairs:
        raise ValidationError("empty batch")
    batch = collate([pair_item(trainer.model.cfg, p, mel_cfg) for p in pairs])
    return trainer.step(batch)


# ---------------------------------------------------------------------------
# The fit loop
# ---------------------------------------------------------------------------

def _load_utterances(manifest_path) -> list:
    utts = read_manifest(manifest_path)
    if not utts:
        raise ValidationError(f"empty manifest: {manifest_path}")
    return [(u, read_wav(u.wav_path)) for u in utts]


def _assert_disjoint(train_utts, valid_utts) -> None:
    overlap = {u.speaker_id for u, _ in train_utts} & {u.speaker_id for u, _ in valid_utts}
    if overlap:
        raise ValidationError(f"speakers appear in both manifests: {sorted(overlap)}")


def _frozen_items(cfg, utts, bank, snr_spec, seed, salt, mel_cfg) -> list:
    rng = np.random.default_rng([seed, salt])
    return [pair_item(cfg, build_pair(w, bank, snr_spec, rng, mel_cfg), mel_cfg)
            for _, w in utts]


def _mean_pair_loss(model, items, batch_size) -> float:
    """Equal-weight mean of per-pair losses, batched by length for speed."""
    order = sorted(range(len(items)), key=lambda i: items[i]["content"].shape[0])
    model.eval()
    values = torch.zeros(len(items))
    with torch.no_grad():
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            losses = pair_losses(model, collate([items[i] for i in chunk]))
            for slot, i in enumerate(chunk):
                values[i] = losses[slot]
    return float(values.mean())


def fit(
    train_manifest,
    valid_manifest,
    train_bank: NoiseBank,
    unseen_bank: NoiseBank,
    run_dir,
    model_cfg: ModelConfig | None = None,
    opt_cfg: OptimizerConfig | None = None,
    fit_cfg: FitConfig | None = None,
    mel_cfg: MelConfig | None = None,
    resume: bool = False,
) -> FitResult:
    """Train until the validation loss stalls; keep the best checkpoint.

    Writes metrics.tsv (deterministic columns only, so identical runs produce
    identical bytes), timing.tsv (wall-clock sidecar), best.ckpt and last.ckpt
    under run_dir.
    """
    model_cfg = model_cfg or ModelConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    fit_cfg = fit_cfg or FitConfig()
    mel_cfg = mel_cfg or MelConfig()
    torch.set_num_threads(1)  # keeps reductions deterministic run to run

    train_utts = _load_utterances(train_manifest)
    valid_utts = _load_utterances(valid_manifest)
    _assert_disjoint(train_utts, valid_utts)
    meta = {"train_speakers": sorted({u.speaker_id for u, _ in train_utts})}

    os.makedirs(run_dir, exist_ok=True)
    metrics_path = os.path.join(run_dir, "metrics.tsv")
    timing_path = os.path.join(run_dir, "timing.tsv")
    best_path = os.path.join(run_dir, "best.ckpt")
    last_path = os.path.join(run_dir, "last.ckpt")

    schedule_steps = fit_cfg.max_steps if opt_cfg.lr_schedule == "cosine" else None
    if resume and os.path.exists(last_path):
        trainer = Trainer.load(last_path, opt_cfg, schedule_steps=schedule_steps)
        if trainer.model.cfg != model_cfg:
            raise ValidationError("resume checkpoint config does not match the requested config")
    else:
        trainer = Trainer(VcModel(model_cfg, seed=fit_cfg.seed), opt_cfg,
                          schedule_steps=schedule_steps)
    model = trainer.model

    snr_spec = fit_cfg.snr_spec
    valid_items = _frozen_items(model_cfg, valid_utts, train_bank, snr_spec,
                                fit_cfg.seed, 0x7A11D, mel_cfg)
    unseen_items = _frozen_items(model_cfg, valid_utts, unseen_bank, snr_spec,
                                 fit_cfg.seed, 0x0DD, mel_cfg)

    mode = "a" if (resume and os.path.exists(metrics_path)) else "w"
    metrics = open(metrics_path, mode, encoding="utf-8")
    timing = open(timing_path, mode, encoding="utf-8")
    if mode == "w":
        metrics.write("step\ttrain_loss\tvalid_loss\tunseen_valid_loss\n")
        timing.write("step\twall_time_s\n")
    t0 = time.time()

    best_valid = float("inf")
    best_unseen = float("inf")
    best_step = 0
    stale = 0
    stopped_early = False
    step_losses: list = []
    window: list = []
    epoch = 0
    cached_batches = None

    try:
        while trainer.step_count < fit_cfg.max_steps and not stopped_early:
            if cached_batches is None:
                noise_epoch = epoch if fit_cfg.resample_noise_each_epoch else 0
                rng = np.random.default_rng([fit_cfg.seed, 0xEB0C, noise_epoch])
                items = [pair_item(model_cfg,
                                   build_pair(w, train_bank, snr_spec, rng, mel_cfg),
                                   mel_cfg)
                         for _, w in train_utts]
                order = sorted(range(len(items)),
                               key=lambda i: (items[i]["content"].shape[0],
                                              train_utts[i][0].utterance_id))
                chunks = [order[s : s + opt_cfg.batch_size]
                          for s in range(0, len(order), opt_cfg.batch_size)]
                rng.shuffle(chunks)
                batches = [collate([items[i] for i in chunk]) for chunk in chunks]
                if not fit_cfg.resample_noise_each_epoch:
                    cached_batches = batches
            else:
                batches = cached_batches
            epoch += 1

            for batch in batches:
                loss = trainer.step(batch)
                step_losses.append(loss.value)
                window.append(loss.value)

                if trainer.step_count % fit_cfg.validate_every == 0:
                    valid_loss = _mean_pair_loss(model, valid_items, opt_cfg.batch_size)
                    unseen_loss = _mean_pair_loss(model, unseen_items, opt_cfg.batch_size)
                    train_loss = sum(window) / len(window)
                    window.clear()
                    metrics.write(f"{trainer.step_count}\t{train_loss!r}\t"
                                  f"{valid_loss!r}\t{unseen_loss!r}\n")
                    timing.write(f"{trainer.step_count}\t{time.time() - t0:.3f}\n")
                    metrics.flush()
                    timing.flush()

                    if valid_loss < best_valid - fit_cfg.min_delta:
                        best_valid = valid_loss
                        best_unseen = unseen_loss
                        best_step = trainer.step_count
                        stale = 0
                        trainer.save(best_path, fit_cfg.seed,
                                     meta={**meta,
                                           "best_valid_loss": best_valid,
                                           "unseen_valid_loss": best_unseen})
                    else:
                        stale += 1
                    trainer.save(last_path, fit_cfg.seed, meta=meta)
                    if stale >= fit_cfg.patience:
                        stopped_early = True
                        break
                if trainer.step_count >= fit_cfg.max_steps:
                    break
    finally:
        metrics.close()
        timing.close()

    trainer.save(last_path, fit_cfg.seed, meta=meta)
    if not os.path.exists(best_path):  # no validation row beat infinity yet
        trainer.save(best_path, fit_cfg.seed, meta=meta)
        best_step = trainer.step_count
    return FitResult(
        checkpoint_path=best_path,
        last_checkpoint_path=last_path,
        metrics_path=metrics_path,
        timing_path=timing_path,
        best_step=best_step,
        best_valid_loss=best_valid,
        best_unseen_valid_loss=best_unseen,
        final_step=trainer.step_count,
        stopped_early=stopped_early,
        step_losses=step_losses,
    )


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def convert_waveforms(
    model: VcModel,
    source: Waveform,
    target: Waveform,
    mel_cfg: MelConfig | None = None,
    gl_iterations: int = 32,
):
    """(predicted mel, reconstructed waveform) for one source/target pair."""
    mel_cfg = mel_cfg or MelConfig()
    tracks = {k: torch.from_numpy(v).float() for k, v in
              source_tracks(model.cfg, source, mel_cfg).items()}
    model.eval()
    with torch.no_grad():
        feats = batch_source_features(model, tracks)
        target_content = torch.from_numpy(extract_content(target, mel_cfg).values).float()
        mel = model.predict_mel(feats, target_content, mel_cfg)
    return mel, reconstruct_waveform(mel, gl_iterations)


def convert(
    checkpoint_path,
    source_wav_path,
    target_wav_path,
    variant: str | None = None,
    mel_cfg: MelConfig | None = None,
    gl_iterations: int = 32,
):
    """File-level conversion; rejects a variant flag that contradicts the checkpoint."""
    model, ckpt = model_from_checkpoint(checkpoint_path)
    if variant is not None and variant != model.cfg.variant:
        raise ValidationError(
            f"checkpoint was trained as '{model.cfg.variant}', asked for '{variant}'"
        )
    source = read_wav(source_wav_path)
    target = read_wav(target_wav_path)
    return convert_waveforms(model, source, target, mel_cfg, gl_iterations)

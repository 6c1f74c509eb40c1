"""Run configuration: one INI file covering every knob of a run.

Writing always emits every field with its resolved value, so the echoed file
in a run directory is sufficient to reproduce that run exactly. Floats are
written with repr and therefore round-trip bit-exactly.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .audio import MelConfig
from .degradation import FILTERED_FAMILY, MODULATED_FAMILY
from .errors import ConfigError
from .model import ModelConfig
from .training import FitConfig, OptimizerConfig

_MODE_NAME = {None: "none", "utterance": "utterance", "frame": "frame"}


@dataclass
class RunConfig:
    mel: MelConfig = field(default_factory=MelConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    n_noises: int = 8
    noise_duration_s: float = 2.0
    noise_seed: int = 0
    train_noise_family: str = FILTERED_FAMILY
    eval_noise_family: str = MODULATED_FAMILY
    gl_iterations: int = 32

    def __post_init__(self):
        if self.mel.n_mels != self.model.n_mels:
            raise ConfigError(
                f"[audio] n_mels {self.mel.n_mels} != [model] n_mels {self.model.n_mels}",
                field="n_mels",
            )
        if self.train_noise_family == self.eval_noise_family:
            raise ConfigError(
                "training and evaluation noise families must differ",
                field="eval_noise_family",
            )


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser["audio"] = {
        "sample_rate_hz": _fmt(cfg.mel.sample_rate_hz),
        "win_ms": _fmt(cfg.mel.win_ms),
        "hop_ms": _fmt(cfg.mel.hop_ms),
        "n_mels": _fmt(cfg.mel.n_mels),
        "floor": _fmt(cfg.mel.floor),
    }
    parser["degradation"] = {
        "snr_low_db": _fmt(cfg.fit.snr_low_db),
        "snr_high_db": _fmt(cfg.fit.snr_high_db),
        "n_noises": _fmt(cfg.n_noises),
        "noise_duration_s": _fmt(cfg.noise_duration_s),
        "noise_seed": _fmt(cfg.noise_seed),
        "train_noise_family": cfg.train_noise_family,
        "eval_noise_family": cfg.eval_noise_family,
        "resample_noise_each_epoch": _fmt(cfg.fit.resample_noise_each_epoch),
    }
    parser["conditioning"] = {
        "quality_mode": _MODE_NAME[cfg.model.quality_mode],
        "scene_mode": _MODE_NAME[cfg.model.scene_mode],
    }
    parser["model"] = {
        "d_model": _fmt(cfg.model.d_model),
        "n_heads": _fmt(cfg.model.n_heads),
        "n_enc_blocks": _fmt(cfg.model.n_enc_blocks),
        "n_dec_blocks": _fmt(cfg.model.n_dec_blocks),
        "n_mels": _fmt(cfg.model.n_mels),
        "projection_init": cfg.model.projection_init,
    }
    parser["optimizer"] = {
        "lr": _fmt(cfg.optimizer.lr),
        "beta1": _fmt(cfg.optimizer.beta1),
        "beta2": _fmt(cfg.optimizer.beta2),
        "weight_decay": _fmt(cfg.optimizer.weight_decay),
        "eps": _fmt(cfg.optimizer.eps),
        "batch_size": _fmt(cfg.optimizer.batch_size),
        "lr_schedule": cfg.optimizer.lr_schedule,
    }
    parser["run"] = {
        "variant": cfg.model.variant,
        "seed": _fmt(cfg.fit.seed),
        "max_steps": _fmt(cfg.fit.max_steps),
        "validate_every": _fmt(cfg.fit.validate_every),
        "patience": _fmt(cfg.fit.patience),
        "min_delta": _fmt(cfg.fit.min_delta),
        "gl_iterations": _fmt(cfg.gl_iterations),
    }
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)


_SCHEMA = {
    "audio": {"sample_rate_hz": int, "win_ms": float, "hop_ms": float,
              "n_mels": int, "floor": float},
    "degradation": {"snr_low_db": float, "snr_high_db": float, "n_noises": int,
                    "noise_duration_s": float, "noise_seed": int,
                    "train_noise_family": str, "eval_noise_family": str,
                    "resample_noise_each_epoch": bool},
    "conditioning": {"quality_mode": str, "scene_mode": str},
    "model": {"d_model": int, "n_heads": int, "n_enc_blocks": int,
              "n_dec_blocks": int, "n_mels": int, "projection_init": str},
    "optimizer": {"lr": float, "beta1": float, "beta2": float,
                  "weight_decay": float, "eps": float, "batch_size": int,
                  "lr_schedule": str},
    "run": {"variant": str, "seed": int, "max_steps": int, "validate_every": int,
            "patience": int, "min_delta": float, "gl_iterations": int},
}

_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False, "on": True, "off": False}


def _parse_value(section: str, key: str, raw: str, kind):
    label = f"{section}.{key}"
    if kind is bool:
        if raw.lower() not in _BOOL:
            raise ConfigError(f"[{section}] {key}: not a boolean: '{raw}'", field=label)
        return _BOOL[raw.lower()]
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: cannot parse '{raw}' as {kind.__name__}", field=label
        ) from None


def read_config(path) -> RunConfig:
    """Parse an INI file; unset fields fall back to defaults, unknown ones fail."""
    parser = configparser.ConfigParser()
    loaded = parser.read(path, encoding="utf-8")
    if not loaded:
        raise ConfigError(f"cannot read config file: {path}")

    values: dict = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]", field=section)
        for key, raw in parser[section].items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown field '{key}' in [{section}]",
                                  field=f"{section}.{key}")
            values[f"{section}.{key}"] = _parse_value(section, key, raw,
                                                      _SCHEMA[section][key])

    def get(label, default):
        return values.get(label, default)

    mel = MelConfig(
        sample_rate_hz=get("audio.sample_rate_hz", 16000),
        win_ms=get("audio.win_ms", 64.0),
        hop_ms=get("audio.hop_ms", 10.0),
        n_mels=get("audio.n_mels", 80),
        floor=get("audio.floor", 1e-5),
    )
    model = ModelConfig(
        d_model=get("model.d_model", 256),
        n_heads=get("model.n_heads", 4),
        n_enc_blocks=get("model.n_enc_blocks", 2),
        n_dec_blocks=get("model.n_dec_blocks", 2),
        n_mels=get("model.n_mels", mel.n_mels),
        variant=get("run.variant", "none-none"),
        projection_init=get("model.projection_init", "fan-in"),
    )
    for role in ("quality", "scene"):
        stated = values.get(f"conditioning.{role}_mode")
        derived = _MODE_NAME[getattr(model, f"{role}_mode")]
        if stated is not None and stated != derived:
            raise ConfigError(
                f"[conditioning] {role}_mode '{stated}' contradicts variant "
                f"'{model.variant}' (implies '{derived}')",
                field=f"conditioning.{role}_mode",
            )
    optimizer = OptimizerConfig(
        lr=get("optimizer.lr", 5e-5),
        beta1=get("optimizer.beta1", 0.9),
        beta2=get("optimizer.beta2", 0.999),
        weight_decay=get("optimizer.weight_decay", 1e-2),
        eps=get("optimizer.eps", 1e-8),
        batch_size=get("optimizer.batch_size", 6),
        lr_schedule=get("optimizer.lr_schedule", "constant"),
    )
    fit = FitConfig(
        seed=get("run.seed", 0),
        max_steps=get("run.max_steps", 2000),
        validate_every=get("run.validate_every", 50),
        patience=get("run.patience", 10),
        min_delta=get("run.min_delta", 1e-4),
        snr_low_db=get("degradation.snr_low_db", 0.0),
        snr_high_db=get("degradation.snr_high_db", 20.0),
        resample_noise_each_epoch=get("degradation.resample_noise_each_epoch", True),
    )
    return RunConfig(
        mel=mel,
        model=model,
        optimizer=optimizer,
        fit=fit,
        n_noises=get("degradation.n_noises", 8),
        noise_duration_s=get("degradation.noise_duration_s", 2.0),
        noise_seed=get("degradation.noise_seed", 0),
        train_noise_family=get("degradation.train_noise_family", FILTERED_FAMILY),
        eval_noise_family=get("degradation.eval_noise_family", MODULATED_FAMILY),
        gl_iterations=get("run.gl_iterations", 32),
    )

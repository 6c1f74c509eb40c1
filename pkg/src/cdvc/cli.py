"""Command-line entry point wiring the whole pipeline.

Every run-producing subcommand resolves its output directory against
$CDVC_RUN_ROOT (when the given path is relative) and drops a fully resolved
config echo there, so any run can be reproduced from its own directory.
Exit codes: 0 success, 1 runtime failure, 2 configuration problem.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import conditioning, corpus, degradation, evaluation, figures, training
from .audio import Waveform, read_wav, write_wav
from .config import RunConfig, read_config, write_config
from .errors import CdvcError, ConfigError
from .model import VARIANTS, ModelConfig

RUN_ROOT_ENV = "CDVC_RUN_ROOT"


def _resolve_run_dir(path: str) -> str:
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _mode(flag: str) -> str:
    return conditioning.UTTERANCE if flag == "uw" else conditioning.FRAME


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_corpus(args) -> int:
    split = tuple(float(x) for x in args.split.split(","))
    lo, hi = (int(x) for x in args.tokens_per_utt.split(","))
    paths = corpus.generate_corpus(
        _resolve_run_dir(args.out),
        n_speakers=args.speakers,
        n_utts_per_speaker=args.utts,
        split_spec=split,
        seed=args.seed,
        duration_per_token_ms=args.token_ms,
        tokens_per_utt=(lo, hi),
    )
    for name, path in paths.items():
        print(f"{name}\t{path}")
    return 0


def _make_bank(args) -> degradation.NoiseBank:
    if getattr(args, "noise_manifest", None):
        return degradation.load_noise_bank(args.noise_manifest)
    return degradation.synthesize_noise_bank(
        args.noise_family, args.n_noises, args.noise_duration, seed=args.noise_seed
    )


def _cmd_degrade(args) -> int:
    clean = read_wav(args.source)
    bank = _make_bank(args)
    rng = np.random.default_rng(args.seed)
    noise_id, noise = degradation.draw_noise(bank, rng)
    noisy = degradation.mix(clean, noise, args.snr, rng)
    write_wav(noisy, args.out)
    achieved = degradation.measure_snr(
        clean, Waveform(noisy.samples - clean.samples, clean.sample_rate_hz)
    ) if args.snr != float("inf") else float("inf")
    print(f"noise_id\t{noise_id}")
    print(f"target_snr_db\t{args.snr}")
    print(f"measured_snr_db\t{achieved}")
    print(f"out\t{args.out}")
    return 0


def _cmd_extract(args) -> int:
    w = read_wav(args.source)
    out_dir = _resolve_run_dir(args.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    tracks = {
        "content": conditioning.extract_content(w),
        "quality": conditioning.extract_quality(w, _mode(args.quality_mode)),
        "scene": conditioning.extract_scene(w, _mode(args.scene_mode)),
    }
    for name, track in tracks.items():
        path = os.path.join(out_dir, f"{name}.ctrk")
        conditioning.save_condition_track(track, path)
        print(f"{name}\t{track.n_frames}x{track.dim}\t{path}")
    return 0


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    model = cfg.model
    fit = cfg.fit
    optimizer = cfg.optimizer
    if args.variant is not None:
        model = dataclasses.replace(model, variant=args.variant)
    if args.d_model is not None:
        model = dataclasses.replace(model, d_model=args.d_model)
    if args.seed is not None:
        fit = dataclasses.replace(fit, seed=args.seed)
    if args.max_steps is not None:
        fit = dataclasses.replace(fit, max_steps=args.max_steps)
    if args.validate_every is not None:
        fit = dataclasses.replace(fit, validate_every=args.validate_every)
    if args.snr_low is not None:
        fit = dataclasses.replace(fit, snr_low_db=args.snr_low)
    if args.snr_high is not None:
        fit = dataclasses.replace(fit, snr_high_db=args.snr_high)
    if args.lr is not None:
        optimizer = dataclasses.replace(optimizer, lr=args.lr)
    if args.batch_size is not None:
        optimizer = dataclasses.replace(optimizer, batch_size=args.batch_size)
    return dataclasses.replace(cfg, model=model, fit=fit, optimizer=optimizer)


def _cmd_train(args) -> int:
    run_dir = _resolve_run_dir(args.run_dir)
    cfg = read_config(args.config) if args.config else RunConfig()
    cfg = _apply_overrides(cfg, args)

    os.makedirs(run_dir, exist_ok=True)
    write_config(cfg, os.path.join(run_dir, "config.ini"))

    train_bank = degradation.synthesize_noise_bank(
        cfg.train_noise_family, cfg.n_noises, cfg.noise_duration_s, seed=cfg.noise_seed
    )
    unseen_bank = degradation.synthesize_noise_bank(
        cfg.eval_noise_family, cfg.n_noises, cfg.noise_duration_s, seed=cfg.noise_seed
    )
    noise_dir = os.path.join(run_dir, "noise")
    degradation.save_noise_bank(train_bank, os.path.join(noise_dir, "train.tsv"),
                                os.path.join(noise_dir, "train"))
    degradation.save_noise_bank(unseen_bank, os.path.join(noise_dir, "unseen.tsv"),
                                os.path.join(noise_dir, "unseen"))

    result = training.fit(
        os.path.join(args.corpus, "train.tsv"),
        os.path.join(args.corpus, "valid.tsv"),
        train_bank,
        unseen_bank,
        run_dir,
        model_cfg=cfg.model,
        opt_cfg=cfg.optimizer,
        fit_cfg=cfg.fit,
        mel_cfg=cfg.mel,
        resume=args.resume,
    )
    figures.plot_training_curves(result.metrics_path,
                                 os.path.join(run_dir, "training.png"))
    print(f"variant\t{cfg.model.variant}")
    print(f"steps\t{result.final_step}")
    print(f"best_step\t{result.best_step}")
    print(f"best_valid_loss\t{result.best_valid_loss}")
    print(f"best_unseen_valid_loss\t{result.best_unseen_valid_loss}")
    print(f"stopped_early\t{result.stopped_early}")
    print(f"checkpoint\t{result.checkpoint_path}")
    return 0


def _cmd_convert(args) -> int:
    mel, wave = training.convert(
        args.checkpoint, args.source, args.target,
        variant=args.variant, gl_iterations=args.gl_iterations,
    )
    write_wav(wave, args.out)
    figure_path = os.path.splitext(args.out)[0] + ".mel.png"
    figures.plot_mel(mel, figure_path, title=os.path.basename(args.out))
    print(f"out\t{args.out}")
    print(f"mel_figure\t{figure_path}")
    return 0


def _cmd_evaluate(args) -> int:
    out_dir = _resolve_run_dir(args.out) if args.out else os.path.join(
        os.path.dirname(os.path.abspath(args.checkpoint)), "eval"
    )
    bank = _make_bank(args)
    report = evaluation.evaluate_system(
        args.checkpoint,
        os.path.join(args.corpus, "eval.tsv"),
        n_pairs=args.pairs,
        seed=args.seed,
        unseen_bank=bank,
        snr_spec=degradation.SnrSpec(args.snr_low, args.snr_high),
        gl_iterations=args.gl_iterations,
    )
    paths = evaluation.save_report(report, out_dir)
    figures.plot_eval_report(report, os.path.join(out_dir, "report.png"))
    print(f"system\t{report.variant}")
    print(f"pairs\t{report.n_pairs}")
    print(f"mean_cer\t{report.mean_cer}")
    print(f"mean_secs\t{report.mean_secs}")
    print(f"std_secs\t{report.std_secs}")
    print(f"summary\t{paths['summary']}")
    return 0


def _cmd_compare(args) -> int:
    rows = []
    for run_dir in args.runs:
        summary = os.path.join(_resolve_run_dir(run_dir), "eval", "summary.tsv")
        if not os.path.exists(summary):
            raise ConfigError(f"no evaluation summary under {run_dir}", field="runs")
        for row in evaluation.load_summary(summary):
            if row["system"] == "identity" and not args.with_identity:
                continue
            rows.append(row)

    header = f"{'system':<12} {'pairs':>5} {'CER':>8} {'SECS':>8} {'(std)':>8}"
    print(header)
    print("-" * len(header))
    for row in rows:
        print(f"{row['system']:<12} {row['n_pairs']:>5} {row['mean_cer']:>8.3f} "
              f"{row['mean_secs']:>8.3f} {row['std_secs']:>8.3f}")

    if args.out:
        out_dir = _resolve_run_dir(args.out)
        os.makedirs(out_dir, exist_ok=True)
        table = os.path.join(out_dir, "comparison.tsv")
        with open(table, "w", encoding="utf-8") as f:
            f.write("system\tn_pairs\tmean_cer\tmean_secs\tstd_secs\n")
            for row in rows:
                f.write(f"{row['system']}\t{row['n_pairs']}\t{row['mean_cer']!r}\t"
                        f"{row['mean_secs']!r}\t{row['std_secs']!r}\n")
        figures.plot_comparison(rows, os.path.join(out_dir, "comparison.png"))
        print(f"table\t{table}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_noise_flags(p: argparse.ArgumentParser, default_family: str) -> None:
    p.add_argument("--noise-manifest", help="use an existing noise bank manifest")
    p.add_argument("--noise-family", default=default_family,
                   choices=(degradation.FILTERED_FAMILY, degradation.MODULATED_FAMILY))
    p.add_argument("--n-noises", type=int, default=8)
    p.add_argument("--noise-duration", type=float, default=2.0)
    p.add_argument("--noise-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdvc",
        description="Noise-robust voice conversion with quality and scene conditioning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="generate the synthetic speech corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=12)
    p.add_argument("--utts", type=int, default=6)
    p.add_argument("--split", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--token-ms", type=float, default=100.0)
    p.add_argument("--tokens-per-utt", default="6,10")
    p.set_defaults(func=_cmd_corpus)

    p = sub.add_parser("degrade", help="mix noise into one file at a target SNR")
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--snr", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    _add_noise_flags(p, degradation.FILTERED_FAMILY)
    p.set_defaults(func=_cmd_degrade)

    p = sub.add_parser("extract-conditions", help="write condition tracks for one file")
    p.add_argument("--source", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--quality-mode", choices=("uw", "fw"), default="uw")
    p.add_argument("--scene-mode", choices=("uw", "fw"), default="uw")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("train", help="run denoising training")
    p.add_argument("--corpus", required=True, help="corpus directory with *.tsv manifests")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--config", help="INI file; flags below override it")
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--validate-every", type=int, default=None)
    p.add_argument("--snr-low", type=float, default=None)
    p.add_argument("--snr-high", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("convert", help="convert one source to a target speaker")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANTS, default=None,
                   help="assert the checkpoint was trained with this variant")
    p.add_argument("--gl-iterations", type=int, default=32)
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("evaluate", help="score a checkpoint on unseen speakers and noise")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report directory (default: <checkpoint dir>/eval)")
    p.add_argument("--snr-low", type=float, default=0.0)
    p.add_argument("--snr-high", type=float, default=20.0)
    p.add_argument("--gl-iterations", type=int, default=32)
    _add_noise_flags(p, degradation.MODULATED_FAMILY)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("compare", help="side-by-side table from evaluated runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", help="write comparison.tsv and comparison.png here")
    p.add_argument("--with-identity", action="store_true",
                   help="include the identity baseline rows")
    p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        where = f" [{e.field}]" if e.field else ""
        print(f"config error{where}: {e}", file=sys.stderr)
        return 2
    except CdvcError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Figure rendering for run directories; every plot lands next to the
delimited file it visualizes. Uses the Agg backend so headless runs work.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .audio import MelSpectrogram


def plot_training_curves(metrics_path, out_path) -> None:
    """Loss curves from a metrics.tsv (step, train, valid, unseen valid)."""
    data = np.genfromtxt(metrics_path, delimiter="\t", names=True)
    data = np.atleast_1d(data)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(data["step"], data["train_loss"], label="train")
    ax.plot(data["step"], data["valid_loss"], label="valid (seen noise)")
    ax.plot(data["step"], data["unseen_valid_loss"], label="valid (unseen noise)")
    ax.set_xlabel("step")
    ax.set_ylabel("L1 loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_mel(mel: MelSpectrogram, out_path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(8, 3))
    im = ax.imshow(mel.values.T, origin="lower", aspect="auto",
                   extent=(0, mel.n_frames * mel.hop_ms / 1000.0, 0, mel.n_mels))
    ax.set_xlabel("time (s)")
    ax.set_ylabel("mel band")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, label="log energy")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_eval_report(report, out_path) -> None:
    """Per-pair CER and SECS distributions, converted vs identity baseline."""
    fig, (ax_cer, ax_secs) = plt.subplots(1, 2, figsize=(9, 3.5))
    groups = [("converted", report.rows)]
    if report.identity_rows:
        groups.append(("identity", report.identity_rows))
    for label, rows in groups:
        ax_cer.hist([r.cer for r in rows], bins=10, alpha=0.6, label=label)
        ax_secs.hist([r.secs for r in rows], bins=10, alpha=0.6, label=label)
    ax_cer.set_xlabel("token error rate")
    ax_cer.set_ylabel("pairs")
    ax_secs.set_xlabel("speaker similarity")
    for ax in (ax_cer, ax_secs):
        ax.legend()
        ax.grid(alpha=0.3)
    fig.suptitle(f"{report.variant}: CER {report.mean_cer:.3f}, "
                 f"SECS {report.mean_secs:.3f} ({report.std_secs:.3f})")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_comparison(summaries: list, out_path) -> None:
    """Grouped bars of mean CER and mean SECS per system row."""
    systems = [row["system"] for row in summaries]
    x = np.arange(len(systems))
    fig, (ax_cer, ax_secs) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_cer.bar(x, [row["mean_cer"] for row in summaries], color="tab:blue")
    ax_cer.set_ylabel("mean CER")
    ax_secs.bar(x, [row["mean_secs"] for row in summaries],
                yerr=[row["std_secs"] for row in summaries],
                color="tab:orange", capsize=4)
    ax_secs.set_ylabel("mean SECS")
    for ax in (ax_cer, ax_secs):
        ax.set_xticks(x)
        ax.set_xticklabels(systems, rotation=20, ha="right")
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)

"""Report figures rendered next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_loss_curve(losses, path) -> None:
    """Training loss per iteration, log-scaled when strictly positive."""
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.plot(range(len(losses)), losses, lw=0.9)
    if losses and min(losses) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("noise-prediction loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_report(report, path) -> None:
    """Per-frame PSNR and SSIM panels for a MetricReport."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.4))
    frames = range(report.n_frames)
    ax1.plot(frames, report.psnr_db, marker="o", ms=3)
    ax1.set_xlabel("frame")
    ax1.set_ylabel("PSNR (dB)")
    ax1.grid(True, alpha=0.3)
    ax2.plot(frames, report.ssim, marker="o", ms=3, color="tab:orange")
    ax2.set_xlabel("frame")
    ax2.set_ylabel("SSIM")
    ax2.grid(True, alpha=0.3)
    title = f"mean PSNR {report.psnr_mean:.2f} dB, mean SSIM {report.ssim_mean:.4f}"
    if report.warped_error is not None:
        title += f", warped error {report.warped_error:.3g}"
    fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

"""Image and video quality metrics on the luminance channel.

PSNR and SSIM operate on [0, 1] images; RGB inputs are reduced to the BT.601
luma channel first. The warped-frame error is the temporal-consistency
stand-in for feature-based video metrics: mean squared error between each
frame at flow-corresponded targets and its predecessor at the sources.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data_io import luminance
from .errors import ImageTooSmall, LengthMismatch, ShapeMismatch
from .temporal import RansacConfig, flow_to_correspondences, geometric_verification

PSNR_CAP_DB = 99.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on the luminance channel.

    Identical inputs (MSE below 1e-10) return the 99 dB cap.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    ya = luminance(a).astype(np.float64)
    yb = luminance(b).astype(np.float64)
    mse = float(np.mean((ya - yb) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode weighted local means via sliding windows (no padding)."""
    size = kernel.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(img, (size, size))
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), valid padding,
    C1 = 0.01^2 and C2 = 0.03^2 on unit dynamic range."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    ya = luminance(a).astype(np.float64)
    yb = luminance(b).astype(np.float64)
    if min(ya.shape) < _SSIM_WINDOW:
        raise ImageTooSmall(f"need >= {_SSIM_WINDOW} pixels per side, got {ya.shape}")
    kernel = _gaussian_kernel(_SSIM_WINDOW, _SSIM_SIGMA)
    mu_a = _windowed_mean(ya, kernel)
    mu_b = _windowed_mean(yb, kernel)
    var_a = _windowed_mean(ya * ya, kernel) - mu_a * mu_a
    var_b = _windowed_mean(yb * yb, kernel) - mu_b * mu_b
    cov = _windowed_mean(ya * yb, kernel) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(np.mean(num / den))


def warped_frame_error(
    frames: np.ndarray,
    flows: np.ndarray,
    verify: RansacConfig | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Temporal-consistency proxy over a frame sequence.

    Mean over frame pairs of the MSE between frame i at corresponded targets
    and frame i-1 at sources; pixels without a correspondence are excluded.
    Pass a RansacConfig to verify correspondences first.
    """
    N = frames.shape[0]
    if N < 2:
        raise LengthMismatch(f"need >= 2 frames, got {N}")
    if flows.shape[0] != N - 1:
        raise LengthMismatch(f"{N} frames need {N - 1} flows, got {flows.shape[0]}")
    H, W = frames.shape[1:3]
    errors = []
    for i in range(1, N):
        corrs = flow_to_correspondences(flows[i - 1])
        if verify is not None:
            corrs = geometric_verification(corrs, verify, rng)
        if len(corrs) == 0:
            continue
        cu, cv, tu, tv = corrs.coords.T
        prev = frames[i - 1][cu, cv].astype(np.float64)
        curr = frames[i][tu, tv].astype(np.float64)
        errors.append(float(np.mean((curr - prev) ** 2)))
    if not errors:
        return 0.0
    return float(np.mean(errors))


@dataclass
class MetricReport:
    psnr_db: list
    ssim: list
    warped_error: float | None = None

    @property
    def n_frames(self) -> int:
        return len(self.psnr_db)

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr_db))

    @property
    def psnr_min(self) -> float:
        return float(np.min(self.psnr_db))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def ssim_min(self) -> float:
        return float(np.min(self.ssim))

    def summary_text(self) -> str:
        lines = [
            f"frames={self.n_frames}",
            f"psnr_mean_db={self.psnr_mean!r}",
            f"psnr_min_db={self.psnr_min!r}",
            f"ssim_mean={self.ssim_mean!r}",
            f"ssim_min={self.ssim_min!r}",
        ]
        if self.warped_error is not None:
            lines.append(f"warped_frame_error={self.warped_error!r}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame_index", "psnr_db", "ssim"])
            for i, (p, s) in enumerate(zip(self.psnr_db, self.ssim)):
                writer.writerow([i, repr(float(p)), repr(float(s))])


def evaluate_frames(
    generated: np.ndarray,
    reference: np.ndarray,
    flows: np.ndarray | None = None,
) -> MetricReport:
    """Per-frame PSNR/SSIM of generated vs reference [0, 1] videos, plus the
    warped-frame error of the generated sequence when flows are given."""
    if generated.shape[0] != reference.shape[0]:
        raise LengthMismatch(
            f"{generated.shape[0]} generated vs {reference.shape[0]} reference frames"
        )
    ps = [psnr(g, r) for g, r in zip(generated, reference)]
    ss = [ssim(g, r) for g, r in zip(generated, reference)]
    warped = None
    if flows is not None and generated.shape[0] >= 2:
        warped = warped_frame_error(generated, flows)
    return MetricReport(psnr_db=ps, ssim=ss, warped_error=warped)

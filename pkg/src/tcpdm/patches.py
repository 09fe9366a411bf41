"""Patch decomposition, per-patch denoising sweeps, and spatial blending.

An image is covered by p x p windows stepped by the cell size r; when r does
not divide (H - p) an extra boundary-aligned row/column of windows is
appended so coverage stays total. Blending averages overlapping patches per
pixel with the coverage count as the weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, reverse_step
from .errors import (
    CoverageHole,
    ImageTooSmall,
    OutOfBounds,
    PatchTooLarge,
    ShapeMismatch,
)


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    patch: int
    cell: int
    positions: tuple  # row-major (u, v) top-left corners

    def __len__(self) -> int:
        return len(self.positions)


def _axis_offsets(extent: int, p: int, r: int) -> list:
    offs = list(range(0, extent - p + 1, r))
    if offs[-1] != extent - p:
        offs.append(extent - p)
    return offs


def decompose(H: int, W: int, p: int, r: int) -> PatchGrid:
    """Sliding-window grid of p x p patches with step r, boundary-aligned.

    Raises PatchTooLarge when p exceeds either image dimension or r is not in
    [1, p].
    """
    if p > H or p > W:
        raise PatchTooLarge(f"patch {p} exceeds image {H}x{W}")
    if not 1 <= r <= p:
        raise PatchTooLarge(f"cell size {r} outside [1, {p}]")
    us = _axis_offsets(H, p, r)
    vs = _axis_offsets(W, p, r)
    positions = tuple((u, v) for u in us for v in vs)
    return PatchGrid(height=H, width=W, patch=p, cell=r, positions=positions)


def crop(tensor: np.ndarray, position, p: int) -> np.ndarray:
    """Contiguous copy of the p x p window at (u, v), all channels."""
    u, v = position
    H, W = tensor.shape[:2]
    if u < 0 or v < 0 or u + p > H or v + p > W:
        raise OutOfBounds(f"window ({u},{v})+{p} outside {H}x{W}")
    return np.ascontiguousarray(tensor[u : u + p, v : v + p])


def crop_all(tensor: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """All grid patches stacked into (K, p, p, C)."""
    p = grid.patch
    return np.stack([tensor[u : u + p, v : v + p] for u, v in grid.positions])


def coverage_counts(grid: PatchGrid) -> np.ndarray:
    counts = np.zeros((grid.height, grid.width), dtype=np.int64)
    p = grid.patch
    for u, v in grid.positions:
        counts[u : u + p, v : v + p] += 1
    return counts


def blend_spatial(patches: np.ndarray, positions, H: int, W: int) -> np.ndarray:
    """Coverage-weighted average of overlapping patches back to a full frame.

    Accumulates in float64 with an integer count plane; raises CoverageHole
    if any pixel is left uncovered.
    """
    K, p = patches.shape[0], patches.shape[1]
    if K != len(positions):
        raise ShapeMismatch(f"{K} patches vs {len(positions)} positions")
    C = patches.shape[3]
    acc = np.zeros((H, W, C), dtype=np.float64)
    counts = np.zeros((H, W), dtype=np.int64)
    for k, (u, v) in enumerate(positions):
        acc[u : u + p, v : v + p] += patches[k]
        counts[u : u + p, v : v + p] += 1
    if np.any(counts == 0):
        raise CoverageHole("patches do not cover the image")
    out = acc / counts[..., None]
    return out.astype(patches.dtype, copy=False)


def denoise_image_step(
    x_t: np.ndarray,
    ir: np.ndarray,
    logits: np.ndarray,
    t: int,
    denoiser,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    p: int,
    r: int,
    blend_mode: str = "denoised",
) -> np.ndarray:
    """One full-image reverse step via patch-wise conditional denoising.

    Decomposes (x_t, ir, logits) on a shared grid, predicts noise per patch,
    applies the reverse step per patch with an independent z each (z = 0 at
    t == 1, drawn in row-major grid order), and blends the results by
    coverage-weighted averaging.

    blend_mode "noise" instead blends the K noise predictions into one
    full-image noise map and takes a single reverse step with one z.
    """
    if x_t.shape[:2] != ir.shape[:2] or x_t.shape[:2] != logits.shape[:2]:
        raise ShapeMismatch(
            f"frames disagree: {x_t.shape} / {ir.shape} / {logits.shape}"
        )
    H, W = x_t.shape[:2]
    grid = decompose(H, W, p, r)
    x_patches = crop_all(x_t, grid)
    y_patches = crop_all(ir, grid)
    s_patches = crop_all(logits, grid)
    K = len(grid)
    t_batch = np.full(K, t, dtype=np.int64)
    eps_pred = denoiser(x_patches, y_patches, s_patches, t_batch)

    if blend_mode == "noise":
        eps_full = blend_spatial(eps_pred, grid.positions, H, W)
        if t > 1:
            z = rng.standard_normal(x_t.shape).astype(x_t.dtype, copy=False)
        else:
            z = np.zeros_like(x_t)
        return reverse_step(x_t, eps_full, t, z, schedule)

    if blend_mode != "denoised":
        raise ShapeMismatch(f"unknown blend_mode {blend_mode!r}")
    if t > 1:
        z = rng.standard_normal(x_patches.shape).astype(x_t.dtype, copy=False)
    else:
        z = np.zeros_like(x_patches)
    i = t - 1
    coef = schedule.betas[i] / np.sqrt(1.0 - schedule.alpha_bars[i])
    denoised = (x_patches - coef * eps_pred) / np.sqrt(schedule.alphas[i])
    denoised += schedule.sigmas[i] * z
    denoised = denoised.astype(x_t.dtype, copy=False)
    return blend_spatial(denoised, grid.positions, H, W)


def random_patch_batch(
    images_x: np.ndarray,
    images_y: np.ndarray,
    images_s: np.ndarray,
    n_images: int,
    patches_per_image: int,
    p: int,
    rng: np.random.Generator,
):
    """Aligned (x, y, s) patch triples cropped at shared random positions.

    Images are drawn uniformly with replacement; each selected image
    contributes patches_per_image crops at positions uniform over the valid
    top-left range. Returns three arrays of length n_images * patches_per_image.
    """
    M, H, W = images_x.shape[:3]
    if H < p or W < p:
        raise ImageTooSmall(f"images {H}x{W} smaller than patch {p}")
    total = n_images * patches_per_image
    xs = np.empty((total, p, p, images_x.shape[3]), dtype=images_x.dtype)
    ys = np.empty((total, p, p, images_y.shape[3]), dtype=images_y.dtype)
    ss = np.empty((total, p, p, images_s.shape[3]), dtype=images_s.dtype)
    img_idx = rng.integers(0, M, size=n_images)
    k = 0
    for j in img_idx:
        us = rng.integers(0, H - p + 1, size=patches_per_image)
        vs = rng.integers(0, W - p + 1, size=patches_per_image)
        for u, v in zip(us, vs):
            xs[k] = images_x[j, u : u + p, v : v + p]
            ys[k] = images_y[j, u : u + p, v : v + p]
            ss[k] = images_s[j, u : u + p, v : v + p]
            k += 1
    return xs, ys, ss

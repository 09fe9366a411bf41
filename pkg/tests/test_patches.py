import numpy as np
import pytest

from tcpdm.diffusion import make_linear_schedule, reverse_step
from tcpdm.errors import CoverageHole, ImageTooSmall, OutOfBounds, PatchTooLarge
from tcpdm.patches import (
    blend_spatial,
    coverage_counts,
    crop,
    crop_all,
    decompose,
    denoise_image_step,
    random_patch_batch,
)


def _brute_force_positions(H, W, p, r):
    """Independent window enumeration used as the grid oracle."""
    us = [u for u in range(0, H - p + 1, r)]
    if us[-1] != H - p:
        us.append(H - p)
    vs = [v for v in range(0, W - p + 1, r)]
    if vs[-1] != W - p:
        vs.append(W - p)
    return [(u, v) for u in us for v in vs]


def test_decompose_paper_configuration():
    grid = decompose(256, 256, 64, 16)
    assert len(grid) == 169
    assert grid.positions == tuple(_brute_force_positions(256, 256, 64, 16))


def test_decompose_single_patch():
    grid = decompose(32, 32, 32, 8)
    assert grid.positions == ((0, 0),)


def test_decompose_quadrants():
    grid = decompose(128, 128, 64, 64)
    assert grid.positions == ((0, 0), (0, 64), (64, 0), (64, 64))


def test_decompose_non_divisible_appends_boundary():
    grid = decompose(30, 30, 8, 7)
    assert grid.positions == tuple(_brute_force_positions(30, 30, 8, 7))
    counts = coverage_counts(grid)
    assert counts.min() >= 1


def test_decompose_errors():
    with pytest.raises(PatchTooLarge):
        decompose(16, 16, 32, 8)
    with pytest.raises(PatchTooLarge):
        decompose(16, 16, 8, 0)
    with pytest.raises(PatchTooLarge):
        decompose(16, 16, 8, 9)


def test_crop_identity_and_indexing():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((12, 10, 3))
    assert np.array_equal(crop(x, (0, 0), 10)[:, :10], x[:10, :10])
    for _ in range(10):
        u = int(rng.integers(0, 8))
        v = int(rng.integers(0, 6))
        patch = crop(x, (u, v), 4)
        assert patch[0, 0, 1] == x[u, v, 1]
        assert np.array_equal(patch, x[u : u + 4, v : v + 4])
    with pytest.raises(OutOfBounds):
        crop(x, (9, 0), 4)


def test_blend_single_patch_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((8, 8, 3)).astype(np.float32)
    out = blend_spatial(x[None], [(0, 0)], 8, 8)
    assert np.array_equal(out, x)


def test_blend_two_overlapping_constants():
    a = np.full((1, 4, 4, 1), 2.0)
    b = np.full((1, 4, 4, 1), 6.0)
    patches = np.concatenate([a, b])
    out = blend_spatial(patches, [(0, 0), (0, 2)], 4, 6)
    assert np.all(out[:, :2, 0] == 2.0)
    assert np.all(out[:, 2:4, 0] == 4.0)
    assert np.all(out[:, 4:, 0] == 6.0)


def test_blend_coverage_hole():
    patch = np.zeros((1, 4, 4, 1))
    with pytest.raises(CoverageHole):
        blend_spatial(patch, [(0, 0)], 8, 8)


@pytest.mark.parametrize(
    "H,W,p,r",
    [
        (256, 256, 64, 16),
        (32, 32, 16, 8),
        (30, 30, 8, 7),
        (17, 23, 5, 3),
        (16, 16, 16, 16),
        (20, 50, 9, 2),
    ],
)
def test_reconstruction_identity(H, W, p, r):
    rng = np.random.default_rng(H * W + p)
    x = rng.standard_normal((H, W, 3)).astype(np.float32)
    grid = decompose(H, W, p, r)
    out = blend_spatial(crop_all(x, grid), grid.positions, H, W)
    assert np.array_equal(out, x)


def test_reconstruction_identity_random_configs():
    rng = np.random.default_rng(99)
    for _ in range(20):
        H = int(rng.integers(8, 48))
        W = int(rng.integers(8, 48))
        p = int(rng.integers(2, min(H, W) + 1))
        r = int(rng.integers(1, p + 1))
        x = rng.standard_normal((H, W, 2)).astype(np.float32)
        grid = decompose(H, W, p, r)
        out = blend_spatial(crop_all(x, grid), grid.positions, H, W)
        assert np.max(np.abs(out - x)) <= 1e-6
        counts = coverage_counts(grid)
        assert counts.min() >= 1
        assert counts.max() <= int(np.ceil(p / r)) ** 2


def test_blend_is_weighted_average_within_bounds():
    rng = np.random.default_rng(4)
    grid = decompose(12, 12, 6, 3)
    patches = rng.standard_normal((len(grid), 6, 6, 1))
    out = blend_spatial(patches, grid.positions, 12, 12)
    lo = np.full((12, 12, 1), np.inf)
    hi = np.full((12, 12, 1), -np.inf)
    for k, (u, v) in enumerate(grid.positions):
        lo[u : u + 6, v : v + 6] = np.minimum(lo[u : u + 6, v : v + 6], patches[k])
        hi[u : u + 6, v : v + 6] = np.maximum(hi[u : u + 6, v : v + 6], patches[k])
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def _zero_denoiser(x, y, s, t):
    return np.zeros_like(x)


def test_denoise_image_step_single_patch_matches_reverse_step():
    sched = make_linear_schedule(6, 0.01, 0.2)
    rng = np.random.default_rng(3)
    H = W = p = 8
    x_t = rng.standard_normal((H, W, 3)).astype(np.float32)
    ir = rng.standard_normal((H, W, 1)).astype(np.float32)
    sl = rng.standard_normal((H, W, 2)).astype(np.float32)

    def denoiser(x, y, s, t):
        return 0.1 * x

    out = denoise_image_step(
        x_t, ir, sl, 4, denoiser, sched, np.random.default_rng(7), p, p
    )
    twin = np.random.default_rng(7)
    z = twin.standard_normal((1, H, W, 3)).astype(np.float32)
    expect = reverse_step(x_t, 0.1 * x_t, 4, z[0], sched).astype(np.float32)
    assert np.allclose(out, expect, atol=1e-6)


def test_denoise_image_step_zero_denoiser_sigma_zero():
    # sigma is forced off by taking t=1 (z = 0 there)
    sched = make_linear_schedule(6, 0.01, 0.2)
    rng = np.random.default_rng(5)
    x_t = rng.standard_normal((16, 16, 3)).astype(np.float32)
    ir = np.zeros((16, 16, 1), dtype=np.float32)
    sl = np.zeros((16, 16, 2), dtype=np.float32)
    out = denoise_image_step(
        x_t, ir, sl, 1, _zero_denoiser, sched, np.random.default_rng(0), 8, 4
    )
    assert np.allclose(out, x_t / np.sqrt(sched.alphas[0]), atol=1e-6)


def test_denoise_image_step_matches_compositional_oracle():
    """Independently coded crop -> reverse_step -> blend loop, same draws."""
    sched = make_linear_schedule(6, 0.01, 0.2)
    rng = np.random.default_rng(8)
    H, W, p, r = 20, 14, 6, 4
    x_t = rng.standard_normal((H, W, 3)).astype(np.float32)
    ir = rng.standard_normal((H, W, 1)).astype(np.float32)
    sl = rng.standard_normal((H, W, 3)).astype(np.float32)

    def denoiser(x, y, s, t):
        return 0.3 * x + 0.1 * y + 0.05 * s.sum(axis=3, keepdims=True)

    t = 3
    out = denoise_image_step(
        x_t, ir, sl, t, denoiser, sched, np.random.default_rng(21), p, r
    )

    from tcpdm.patches import decompose as dec

    grid = dec(H, W, p, r)
    twin = np.random.default_rng(21)
    zs = twin.standard_normal((len(grid), p, p, 3)).astype(np.float32)
    result = []
    for k, (u, v) in enumerate(grid.positions):
        xp = x_t[u : u + p, v : v + p]
        yp = ir[u : u + p, v : v + p]
        sp = sl[u : u + p, v : v + p]
        eps = denoiser(xp[None], yp[None], sp[None], np.array([t]))[0]
        result.append(reverse_step(xp, eps, t, zs[k], sched))
    expect = blend_spatial(
        np.stack(result).astype(np.float32), grid.positions, H, W
    )
    assert np.allclose(out, expect, atol=1e-6)


def test_denoise_image_step_noise_blend_mode():
    sched = make_linear_schedule(6, 0.01, 0.2)
    rng = np.random.default_rng(12)
    H = W = 12
    x_t = rng.standard_normal((H, W, 3)).astype(np.float32)
    ir = rng.standard_normal((H, W, 1)).astype(np.float32)
    sl = rng.standard_normal((H, W, 2)).astype(np.float32)

    def denoiser(x, y, s, t):
        return 0.2 * x

    t = 4
    out = denoise_image_step(
        x_t, ir, sl, t, denoiser, sched, np.random.default_rng(33), 6, 3,
        blend_mode="noise",
    )
    grid = decompose(H, W, 6, 3)
    eps_patches = np.stack(
        [0.2 * x_t[u : u + 6, v : v + 6] for u, v in grid.positions]
    ).astype(np.float32)
    eps_full = blend_spatial(eps_patches, grid.positions, H, W)
    twin = np.random.default_rng(33)
    z = twin.standard_normal((H, W, 3)).astype(np.float32)
    expect = reverse_step(x_t, eps_full, t, z, sched)
    assert np.allclose(out, expect, atol=1e-6)


def test_random_patch_batch_sizes_and_alignment():
    rng = np.random.default_rng(0)
    M, H, W = 3, 20, 22
    xs = rng.standard_normal((M, H, W, 3)).astype(np.float32)
    ys = xs[..., :1] * 2.0
    ss = xs * 3.0
    bx, by, bs = random_patch_batch(xs, ys, ss, 8, 4, 5, np.random.default_rng(1))
    assert bx.shape == (32, 5, 5, 3)
    assert by.shape == (32, 5, 5, 1)
    assert bs.shape == (32, 5, 5, 3)
    # alignment: the y/s crops come from the same image and position as x
    assert np.allclose(by, bx[..., :1] * 2.0)
    assert np.allclose(bs, bx * 3.0)


def test_random_patch_batch_degenerate_position():
    rng = np.random.default_rng(0)
    xs = rng.standard_normal((2, 5, 5, 3)).astype(np.float32)
    ys = xs[..., :1]
    ss = xs
    bx, _, _ = random_patch_batch(xs, ys, ss, 4, 2, 5, np.random.default_rng(3))
    # image size equals patch size: every crop is the full image
    for k in range(bx.shape[0]):
        assert any(np.array_equal(bx[k], xs[m]) for m in range(2))


def test_random_patch_batch_too_small():
    xs = np.zeros((1, 4, 4, 3))
    with pytest.raises(ImageTooSmall):
        random_patch_batch(xs, xs[..., :1], xs, 1, 1, 5, np.random.default_rng(0))


def test_random_patch_batch_positions_uniform():
    """Chi-squared uniformity over the valid position lattice at 1%."""
    rng = np.random.default_rng(2024)
    H = W = 12
    p = 5
    xs = np.zeros((1, H, W, 1), dtype=np.float32)
    for k in range(H):
        for j in range(W):
            xs[0, k, j, 0] = k * W + j  # position-identifying values
    n_draws = 100_000
    bx, _, _ = random_patch_batch(xs, xs, xs, n_draws, 1, p, rng)
    codes = bx[:, 0, 0, 0].astype(np.int64)
    n_cells = (H - p + 1) * (W - p + 1)  # 64 positions, df = 63
    counts = np.bincount(
        (codes // W) * (W - p + 1) + codes % W, minlength=n_cells
    )
    chi2 = ((counts - n_draws / n_cells) ** 2 / (n_draws / n_cells)).sum()
    assert chi2 < 92.0100236  # chi2.ppf(0.99, 63)

"""Flow-guided temporal blending of denoising trajectories.

Coordinates are (u, v) = (row, column); flow fields carry (drow, dcol) in
pixels mapping frame i-1 pixels to frame i. Correspondences are geometrically
verified with a fundamental matrix estimated by the normalized eight-point
algorithm inside RANSAC; near-static pairs and tiny correspondence sets skip
verification with a flag instead of failing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data_io import round_half_away
from .diffusion import NoiseSchedule
from .errors import DegenerateConfiguration, LengthMismatch, ShapeMismatch
from .patches import denoise_image_step


@dataclass(frozen=True)
class CorrespondenceSet:
    """Integer pixel matches (u, v, u', v') between one frame pair."""

    coords: np.ndarray                 # (N, 4) int64
    frame_shape: tuple                 # (H, W)
    verification_skipped: bool = False
    inlier_mask: np.ndarray | None = None   # over the pre-verification set
    model: np.ndarray | None = None         # fundamental matrix, if estimated

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class BlendWeight:
    """Guidance weight w_T * omega**steps; decays once per blended step.

    Representing the exponent explicitly keeps the trajectory w = w_T *
    omega**k exact instead of accumulating repeated products.
    """

    initial: float
    omega: float
    steps: int = 0

    @property
    def value(self) -> float:
        if self.steps == 0:
            return float(self.initial)
        return float(self.initial * self.omega**self.steps)

    def decayed(self) -> "BlendWeight":
        return replace(self, steps=self.steps + 1)


@dataclass(frozen=True)
class RansacConfig:
    max_iters: int = 1000
    threshold: float = 1.0         # Sampson distance, px^2
    confidence: float = 0.999
    min_motion: float = 0.5        # mean |flow| below which verification is skipped


def flow_to_correspondences(flow: np.ndarray) -> CorrespondenceSet:
    """One candidate match per source pixel, targets rounded half away from
    zero; candidates landing outside the frame are dropped."""
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ShapeMismatch(f"flow must be (H, W, 2), got {flow.shape}")
    H, W = flow.shape[:2]
    uu, vv = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    up = round_half_away(uu + flow[..., 0]).astype(np.int64)
    vp = round_half_away(vv + flow[..., 1]).astype(np.int64)
    valid = (up >= 0) & (up < H) & (vp >= 0) & (vp < W)
    coords = np.stack(
        [uu[valid], vv[valid], up[valid], vp[valid]], axis=1
    ).astype(np.int64)
    return CorrespondenceSet(coords=coords, frame_shape=(H, W))


def _normalization(points: np.ndarray) -> np.ndarray:
    """Hartley similarity: centroid to origin, mean distance sqrt(2)."""
    centroid = points.mean(axis=0)
    dist = np.sqrt(((points - centroid) ** 2).sum(axis=1)).mean()
    if dist < 1e-12:
        raise DegenerateConfiguration("all points coincide")
    s = np.sqrt(2.0) / dist
    return np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )


def estimate_fundamental_8pt(corrs) -> np.ndarray:
    """Normalized eight-point estimate of the fundamental matrix.

    Accepts a CorrespondenceSet or an (N, 4) array with N >= 8. The result
    has rank 2 (smallest singular value zeroed) and unit Frobenius norm;
    sign is fixed by making the largest-magnitude entry positive. Raises
    DegenerateConfiguration when the design matrix has rank < 8.
    """
    coords = corrs.coords if isinstance(corrs, CorrespondenceSet) else np.asarray(corrs)
    if coords.shape[0] < 8:
        raise DegenerateConfiguration(f"need >= 8 correspondences, got {coords.shape[0]}")
    src = coords[:, 0:2].astype(np.float64)
    dst = coords[:, 2:4].astype(np.float64)
    Ts = _normalization(src)
    Td = _normalization(dst)
    sn = src @ Ts[:2, :2].T + Ts[:2, 2]
    dn = dst @ Td[:2, :2].T + Td[:2, 2]
    a, b = dn[:, 0], dn[:, 1]
    c, d = sn[:, 0], sn[:, 1]
    ones = np.ones_like(a)
    A = np.stack([a * c, a * d, a, b * c, b * d, b, c, d, ones], axis=1)
    _, sv, vt = np.linalg.svd(A, full_matrices=True)
    if sv[7] <= 1e-8 * sv[0]:
        raise DegenerateConfiguration("design matrix rank < 8 (degenerate points)")
    F = vt[-1].reshape(3, 3)
    fu, fs, fvt = np.linalg.svd(F)
    fs[2] = 0.0
    F = fu @ np.diag(fs) @ fvt
    F = Td.T @ F @ Ts
    F /= np.linalg.norm(F)
    flat = F.ravel()
    if flat[np.argmax(np.abs(flat))] < 0:
        F = -F
    return F


def sampson_distance(F: np.ndarray, corrs) -> np.ndarray:
    """First-order geometric residual per correspondence, in px^2.

    Zero denominators (epipole coincidence) map to +inf so they count as
    outliers.
    """
    coords = corrs.coords if isinstance(corrs, CorrespondenceSet) else np.asarray(corrs)
    coords = np.atleast_2d(coords).astype(np.float64)
    ones = np.ones(coords.shape[0])
    x = np.stack([coords[:, 0], coords[:, 1], ones], axis=1)
    xp = np.stack([coords[:, 2], coords[:, 3], ones], axis=1)
    Fx = x @ F.T
    Ftxp = xp @ F
    num = np.einsum("ij,ij->i", xp, Fx) ** 2
    den = Fx[:, 0] ** 2 + Fx[:, 1] ** 2 + Ftxp[:, 0] ** 2 + Ftxp[:, 1] ** 2
    out = np.full(coords.shape[0], np.inf)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def geometric_verification(
    corrs: CorrespondenceSet,
    cfg: RansacConfig = RansacConfig(),
    rng: np.random.Generator | None = None,
) -> CorrespondenceSet:
    """RANSAC over random 8-subsets, keeping inliers of the consensus model.

    Degraded inputs take a flagged skip path instead of failing: fewer than 8
    matches, near-static motion (mean flow below cfg.min_motion), or no
    non-degenerate hypothesis found.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    n = len(corrs)
    if n < 8:
        return replace(corrs, verification_skipped=True)
    disp = corrs.coords[:, 2:4] - corrs.coords[:, 0:2]
    mean_motion = float(np.sqrt((disp.astype(np.float64) ** 2).sum(axis=1)).mean())
    if mean_motion < cfg.min_motion:
        return replace(corrs, verification_skipped=True)

    best_count = -1
    best_inliers = None
    needed = cfg.max_iters
    it = 0
    while it < min(cfg.max_iters, needed):
        it += 1
        pick = rng.choice(n, size=8, replace=False)
        try:
            F = estimate_fundamental_8pt(corrs.coords[pick])
        except DegenerateConfiguration:
            continue
        d = sampson_distance(F, corrs)
        inl = d < cfg.threshold
        count = int(inl.sum())
        if count > best_count:
            best_count = count
            best_inliers = inl
            ratio = count / n
            if ratio >= 1.0:
                break
            denom = np.log1p(-min(ratio**8, 1.0 - 1e-12))
            if denom < 0:
                needed = int(np.ceil(np.log(1.0 - cfg.confidence) / denom))
    if best_inliers is None or best_count < 8:
        return replace(corrs, verification_skipped=True)

    # refit on the consensus set for a cleaner final model
    final_inliers = best_inliers
    model = None
    try:
        model = estimate_fundamental_8pt(corrs.coords[best_inliers])
        d = sampson_distance(model, corrs)
        refit = d < cfg.threshold
        if refit.sum() >= best_count:
            final_inliers = refit
    except DegenerateConfiguration:
        pass
    return CorrespondenceSet(
        coords=corrs.coords[final_inliers],
        frame_shape=corrs.frame_shape,
        verification_skipped=False,
        inlier_mask=final_inliers,
        model=model,
    )


def temporal_blend(
    x_hat_curr: np.ndarray,
    x_prev: np.ndarray,
    corrs: CorrespondenceSet,
    w: BlendWeight,
    collision: str = "average",
):
    """Blend the current denoised state toward flow-corresponded pixels of the
    previous frame's state at the same timestep.

    The weight decays first (w' = w * omega); at each correspondence target
    the output is (1 - w') * current + w' * previous[source]. With
    collision="average", multiple sources mapping to one target contribute
    their mean (order-independent); "last" reproduces the literal
    last-write-wins in correspondence order. Returns (blended, w').
    """
    if x_hat_curr.shape != x_prev.shape:
        raise ShapeMismatch(f"{x_hat_curr.shape} vs {x_prev.shape}")
    H, W = x_hat_curr.shape[:2]
    if corrs.frame_shape != (H, W):
        raise ShapeMismatch(f"correspondences for {corrs.frame_shape}, frames {H}x{W}")
    w2 = w.decayed()
    out = x_hat_curr.copy()
    wv = w2.value
    if len(corrs) == 0 or wv == 0.0:
        return out, w2
    C = x_hat_curr.shape[2]
    src = corrs.coords[:, 0] * W + corrs.coords[:, 1]
    dst = corrs.coords[:, 2] * W + corrs.coords[:, 3]
    prev_flat = x_prev.reshape(-1, C).astype(np.float64)
    out_flat = out.reshape(-1, C)

    if collision == "average":
        counts = np.bincount(dst, minlength=H * W).astype(np.float64)
        acc = np.empty((H * W, C))
        for c in range(C):
            acc[:, c] = np.bincount(dst, weights=prev_flat[src, c], minlength=H * W)
        touched = counts > 0
        prev_vals = acc[touched] / counts[touched, None]
    elif collision == "last":
        # np.unique sorts targets ascending and reports first occurrences in
        # the reversed list, i.e. the last write per target in list order
        _, first_of_rev = np.unique(dst[::-1], return_index=True)
        last_idx = len(dst) - 1 - first_of_rev
        touched = np.zeros(H * W, dtype=bool)
        touched[dst[last_idx]] = True
        prev_vals = prev_flat[src[last_idx]]
    else:
        raise ShapeMismatch(f"unknown collision policy {collision!r}")

    blended = (1.0 - wv) * out_flat[touched].astype(np.float64) + wv * prev_vals
    out_flat[touched] = blended.astype(out.dtype)
    return out, w2


@dataclass(frozen=True)
class TranslateConfig:
    patch: int
    cell: int
    w_initial: float = 1.0
    omega: float = 0.9
    collision: str = "average"
    blend_mode: str = "denoised"
    ransac: RansacConfig = field(default_factory=RansacConfig)
    seed: int = 0
    use_ema: bool = True


def _frame_rng(seed: int, frame: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, frame])


def _corr_rng(seed: int, frame: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, frame])


def translate_frame(
    ir: np.ndarray,
    logits: np.ndarray,
    denoiser,
    schedule: NoiseSchedule,
    cfg: TranslateConfig,
    rng: np.random.Generator,
    record_trajectory: bool = False,
):
    """Full denoising sweep for one frame, no temporal guidance.

    Returns the final state, or (final, trajectory) with trajectory[t-1]
    holding the state after the step at t.
    """
    H, W = ir.shape[:2]
    x = rng.standard_normal((H, W, 3)).astype(np.float32)
    trajectory = [None] * schedule.T if record_trajectory else None
    for t in range(schedule.T, 0, -1):
        x = denoise_image_step(
            x, ir, logits, t, denoiser, schedule, rng,
            cfg.patch, cfg.cell, cfg.blend_mode,
        )
        if record_trajectory:
            trajectory[t - 1] = x
    if record_trajectory:
        return x, trajectory
    return x


def translate_video(
    ir_frames: np.ndarray,
    logits_per_frame: np.ndarray,
    flows: np.ndarray,
    denoiser,
    schedule: NoiseSchedule,
    cfg: TranslateConfig,
) -> np.ndarray:
    """Translate an infrared video into visible frames with temporal guidance.

    Frame 0 runs the plain semantic-guided sweep; every later frame blends
    each intermediate state toward the previous frame's cached state at the
    same timestep through geometrically verified flow correspondences.
    Correspondences are computed once per frame pair. Per-frame noise comes
    from streams derived as (seed, frame), so omega = 0 reproduces
    independent per-frame generation bit-exactly. Output is clamped to
    [-1, 1] model range.
    """
    N = ir_frames.shape[0]
    if logits_per_frame.shape[0] != N:
        raise LengthMismatch(f"{N} frames but {logits_per_frame.shape[0]} logit maps")
    if flows.shape[0] != max(N - 1, 0):
        raise LengthMismatch(f"{N} frames need {N - 1} flows, got {flows.shape[0]}")
    if N == 0:
        return np.zeros((0,) + ir_frames.shape[1:3] + (3,), dtype=np.float32)
    H, W = ir_frames.shape[1:3]

    out = np.empty((N, H, W, 3), dtype=np.float32)
    prev_traj = None
    for i in range(N):
        rng = _frame_rng(cfg.seed, i)
        corrs = None
        if i > 0:
            corrs = geometric_verification(
                flow_to_correspondences(flows[i - 1]), cfg.ransac, _corr_rng(cfg.seed, i)
            )
        x = rng.standard_normal((H, W, 3)).astype(np.float32)
        traj = [None] * schedule.T
        w = BlendWeight(cfg.w_initial, cfg.omega)
        for t in range(schedule.T, 0, -1):
            x = denoise_image_step(
                x, ir_frames[i], logits_per_frame[i], t, denoiser, schedule, rng,
                cfg.patch, cfg.cell, cfg.blend_mode,
            )
            if i > 0:
                x, w = temporal_blend(x, prev_traj[t - 1], corrs, w, cfg.collision)
            traj[t - 1] = x
        prev_traj = traj
        out[i] = np.clip(x, -1.0, 1.0)
    return out

"""Tensor container, image import/export, and the synthetic scene generator.

The ``.tct`` container is the bit-exact interchange format for every tensor
the pipeline persists (logits, flows, checkpoints). Layout, little-endian
throughout:

    magic   4 bytes  b"TCT1"
    dtype   u8       0 = float32, 1 = float64, 2 = uint8
    ndim    u8
    dims    ndim x u32
    payload row-major, product(dims) * itemsize bytes

Raster import/export is 8-bit PNG only (RGB or grayscale); videos are
frame-numbered PNG directories.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import (
    BadMagic,
    ChannelMismatch,
    InvalidConfig,
    LengthMismatch,
    ShapeOutOfFrame,
    TruncatedPayload,
    UnsupportedDtype,
)

_MAGIC = b"TCT1"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


def write_tensor(path, tensor: np.ndarray) -> None:
    """Serialize a tensor to the container format (exact round trip)."""
    arr = np.ascontiguousarray(tensor)
    key = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if key not in _DTYPE_CODES:
        raise UnsupportedDtype(f"dtype {arr.dtype} not storable")
    code = _DTYPE_CODES[key]
    arr = arr.astype(key, copy=False)
    header = _MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a container file back, validating header and payload length."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise BadMagic(f"{path}: magic {blob[:4]!r}")
    if len(blob) < 6:
        raise TruncatedPayload(f"{path}: header incomplete")
    code, ndim = struct.unpack_from("<BB", blob, 4)
    if code not in _CODE_DTYPES:
        raise UnsupportedDtype(f"{path}: dtype code {code}")
    dims_end = 6 + 4 * ndim
    if len(blob) < dims_end:
        raise TruncatedPayload(f"{path}: dims incomplete")
    dims = struct.unpack_from(f"<{ndim}I", blob, 6)
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = blob[dims_end:]
    if len(payload) != expected:
        raise TruncatedPayload(
            f"{path}: payload {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def read_png(path) -> np.ndarray:
    """Load a PNG as uint8 (H, W, 1) for grayscale or (H, W, 3) for color."""
    with Image.open(path) as im:
        if im.mode == "L":
            arr = np.asarray(im, dtype=np.uint8)[..., None]
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr


def write_png(path, image: np.ndarray) -> None:
    """Write a uint8 (H, W, 1|3) array as grayscale or RGB PNG."""
    if image.dtype != np.uint8:
        raise UnsupportedDtype(f"expected uint8 pixels, got {image.dtype}")
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ChannelMismatch(f"expected (H, W, 1|3), got {image.shape}")
    if image.shape[2] == 1:
        Image.fromarray(image[..., 0], mode="L").save(path)
    else:
        Image.fromarray(image, mode="RGB").save(path)


# BT.601 full-range luma/chroma coefficients.
_KR, _KG, _KB = 0.299, 0.587, 0.114
_CB_SCALE, _CR_SCALE = 0.564, 0.713


def rgb_to_ycbcr(image: np.ndarray) -> np.ndarray:
    """BT.601 full-range RGB -> YCbCr on a float image in [0, 1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ChannelMismatch(f"expected (H, W, 3), got {image.shape}")
    r, g, b = image[..., 0], image[..., 1], image[..., 2]
    y = _KR * r + _KG * g + _KB * b
    cb = 0.5 + (b - y) * _CB_SCALE
    cr = 0.5 + (r - y) * _CR_SCALE
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(image: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_ycbcr; exact to floating-point rounding."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ChannelMismatch(f"expected (H, W, 3), got {image.shape}")
    y, cb, cr = image[..., 0], image[..., 1], image[..., 2]
    r = y + (cr - 0.5) / _CR_SCALE
    b = y + (cb - 0.5) / _CB_SCALE
    g = (y - _KR * r - _KB * b) / _KG
    return np.stack([r, g, b], axis=-1)


def luminance(image: np.ndarray) -> np.ndarray:
    """Y channel of a [0, 1] image; single-channel images pass through."""
    if image.ndim == 2:
        return image
    if image.shape[2] == 1:
        return image[..., 0]
    if image.shape[2] == 3:
        return rgb_to_ycbcr(image)[..., 0]
    raise ChannelMismatch(f"cannot take luminance of shape {image.shape}")


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer with halves away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_model_range(u8_image: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float32 model range via x = 2*(v/255) - 1."""
    x = 2.0 * (u8_image.astype(np.float64) / 255.0) - 1.0
    return x.astype(np.float32)


def from_model_range(image: np.ndarray) -> np.ndarray:
    """Model range -> uint8, clamping to [-1, 1] and rounding half away from zero."""
    x = np.clip(image.astype(np.float64), -1.0, 1.0)
    v = (x + 1.0) * (255.0 / 2.0)
    return round_half_away(v).astype(np.uint8)


def unit_to_u8(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> uint8 (round half away from zero)."""
    v = np.clip(image.astype(np.float64), 0.0, 1.0) * 255.0
    return round_half_away(v).astype(np.uint8)


def u8_to_unit(image: np.ndarray) -> np.ndarray:
    return (image.astype(np.float32) / np.float32(255.0)).astype(np.float32)


@dataclass(frozen=True)
class ShapeSpec:
    """One moving shape: integral velocity keeps the ground-truth flow exact."""

    kind: str                      # "rectangle" | "disk"
    size: tuple                    # (h, w) for rectangle, (radius,) for disk
    start: tuple                   # top-left (rect) / center (disk), (u, v)
    velocity: tuple                # integer (du, dv) per frame
    color: tuple                   # RGB in [0, 1]
    ir_intensity: float            # [0, 1]
    category: int                  # 1-based; 0 is background


@dataclass(frozen=True)
class SyntheticSceneConfig:
    height: int
    width: int
    n_frames: int
    shapes: tuple
    num_categories: int
    background_color: tuple = (0.08, 0.1, 0.12)
    background_ir: float = 0.15
    tau: float = 0.25              # logit temperature; 0 emits exact one-hot maps
    noise: float = 0.0             # optional uniform texture amplitude on ir/vis
    seed: int = 0


@dataclass
class SceneData:
    """Rendered scene with exact ground truth for closed-loop tests."""

    ir: np.ndarray         # (N, H, W, 1) float32 in [0, 1]
    vis: np.ndarray        # (N, H, W, 3) float32 in [0, 1]
    logits: np.ndarray     # (N, H, W, L) float32, rows sum to 1
    flows: np.ndarray      # (N-1, H, W, 2) float32, (drow, dcol)
    masks: np.ndarray      # (N, H, W) uint8 category ids
    num_categories: int = field(default=0)


def _shape_support(shape: ShapeSpec, frame: int, H: int, W: int) -> tuple:
    """Boolean support of a shape at a given frame; raises if it leaves the frame."""
    du, dv = shape.velocity
    if du != int(du) or dv != int(dv):
        raise InvalidConfig(f"velocity must be integral, got {shape.velocity}")
    u = shape.start[0] + int(du) * frame
    v = shape.start[1] + int(dv) * frame
    mask = np.zeros((H, W), dtype=bool)
    if shape.kind == "rectangle":
        h, w = shape.size
        if u < 0 or v < 0 or u + h > H or v + w > W:
            raise ShapeOutOfFrame(
                f"rectangle at ({u},{v}) size {shape.size} leaves {H}x{W} at frame {frame}"
            )
        mask[u : u + h, v : v + w] = True
    elif shape.kind == "disk":
        (radius,) = shape.size
        if u - radius < 0 or v - radius < 0 or u + radius >= H or v + radius >= W:
            raise ShapeOutOfFrame(
                f"disk at ({u},{v}) radius {radius} leaves {H}x{W} at frame {frame}"
            )
        uu, vv = np.ogrid[:H, :W]
        mask[(uu - u) ** 2 + (vv - v) ** 2 <= radius**2] = True
    else:
        raise InvalidConfig(f"unknown shape kind {shape.kind!r}")
    return mask


def _soften_onehot(mask: np.ndarray, L: int, tau: float) -> np.ndarray:
    """Per-pixel category distribution: softmax(onehot / tau), exact one-hot at tau == 0."""
    H, W = mask.shape
    onehot = np.zeros((H, W, L), dtype=np.float64)
    uu, vv = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    onehot[uu, vv, mask] = 1.0
    if tau <= 0.0:
        return onehot.astype(np.float32)
    z = onehot / tau
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    return probs.astype(np.float32)


def synth_scene(cfg: SyntheticSceneConfig) -> SceneData:
    """Render moving shapes over a static background with exact ground truth.

    Later shapes in the list draw on top of earlier ones; the flow at a pixel
    is the velocity of the topmost shape covering it (0 on background). The
    emitted flow warps frame i's mask onto frame i+1 exactly as long as shape
    supports do not overlap.
    """
    H, W, N, L = cfg.height, cfg.width, cfg.n_frames, cfg.num_categories
    if N < 1:
        raise InvalidConfig(f"need n_frames >= 1, got {N}")
    for sh in cfg.shapes:
        if not 0 < sh.category < L:
            raise InvalidConfig(
                f"category {sh.category} outside [1, {L})"
            )

    rng = np.random.default_rng(cfg.seed)
    ir = np.empty((N, H, W, 1), dtype=np.float32)
    vis = np.empty((N, H, W, 3), dtype=np.float32)
    logits = np.empty((N, H, W, L), dtype=np.float32)
    flows = np.zeros((max(N - 1, 0), H, W, 2), dtype=np.float32)
    masks = np.empty((N, H, W), dtype=np.uint8)

    for i in range(N):
        mask = np.zeros((H, W), dtype=np.uint8)
        vframe = np.broadcast_to(
            np.asarray(cfg.background_color, dtype=np.float32), (H, W, 3)
        ).copy()
        irframe = np.full((H, W, 1), cfg.background_ir, dtype=np.float32)
        flow = np.zeros((H, W, 2), dtype=np.float32)
        for sh in cfg.shapes:
            support = _shape_support(sh, i, H, W)
            mask[support] = sh.category
            vframe[support] = np.asarray(sh.color, dtype=np.float32)
            irframe[support, 0] = sh.ir_intensity
            flow[support] = np.asarray(sh.velocity, dtype=np.float32)
        if cfg.noise > 0.0:
            vframe = np.clip(
                vframe + rng.uniform(-cfg.noise, cfg.noise, vframe.shape), 0.0, 1.0
            ).astype(np.float32)
            irframe = np.clip(
                irframe + rng.uniform(-cfg.noise, cfg.noise, irframe.shape), 0.0, 1.0
            ).astype(np.float32)
        masks[i] = mask
        vis[i] = vframe
        ir[i] = irframe
        logits[i] = _soften_onehot(mask, L, cfg.tau)
        if i < N - 1:
            flows[i] = flow
    return SceneData(
        ir=ir, vis=vis, logits=logits, flows=flows, masks=masks, num_categories=L
    )


@dataclass
class Dataset:
    """Paired frames as loaded from a dataset directory."""

    ir: np.ndarray         # (N, H, W, 1) uint8
    vis: np.ndarray        # (N, H, W, 3) uint8
    logits: np.ndarray     # (N, H, W, L) float32
    flows: np.ndarray      # (N-1, H, W, 2) float32
    masks: np.ndarray | None
    manifest: dict

    @property
    def n_frames(self) -> int:
        return self.ir.shape[0]

    def model_arrays(self):
        """(vis, ir, logits) with images converted to [-1, 1] model range."""
        return to_model_range(self.vis), to_model_range(self.ir), self.logits


def save_dataset(root, scene: SceneData) -> None:
    """Write the dataset directory layout.

    ir/{i:05}.png, vis/{i:05}.png, logits/{i:05}.tct, flow/{i:05}.tct
    (flow i relates frames i and i+1), masks/{i:05}.tct for test oracles, and
    manifest.txt with H, W, N, L.
    """
    root = os.fspath(root)
    for sub in ("ir", "vis", "logits", "flow", "masks"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    N, H, W = scene.ir.shape[:3]
    for i in range(N):
        write_png(os.path.join(root, "ir", f"{i:05}.png"), unit_to_u8(scene.ir[i]))
        write_png(os.path.join(root, "vis", f"{i:05}.png"), unit_to_u8(scene.vis[i]))
        write_tensor(os.path.join(root, "logits", f"{i:05}.tct"), scene.logits[i])
        write_tensor(os.path.join(root, "masks", f"{i:05}.tct"), scene.masks[i])
        if i < N - 1:
            write_tensor(os.path.join(root, "flow", f"{i:05}.tct"), scene.flows[i])
    manifest = {
        "H": H,
        "W": W,
        "N": N,
        "L": scene.logits.shape[-1],
    }
    write_manifest(os.path.join(root, "manifest.txt"), manifest)


def write_manifest(path, entries: dict) -> None:
    with open(path, "w") as fh:
        for key, value in entries.items():
            fh.write(f"{key}={value}\n")


def read_manifest(path) -> dict:
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    return entries


def load_dataset(root) -> Dataset:
    """Read a dataset directory back; validates counts against the manifest."""
    root = os.fspath(root)
    manifest = read_manifest(os.path.join(root, "manifest.txt"))
    N = int(manifest["N"])
    ir = np.stack([read_png(os.path.join(root, "ir", f"{i:05}.png")) for i in range(N)])
    vis = np.stack(
        [read_png(os.path.join(root, "vis", f"{i:05}.png")) for i in range(N)]
    )
    logits = np.stack(
        [read_tensor(os.path.join(root, "logits", f"{i:05}.tct")) for i in range(N)]
    )
    if N > 1:
        flows = np.stack(
            [read_tensor(os.path.join(root, "flow", f"{i:05}.tct")) for i in range(N - 1)]
        )
    else:
        flows = np.zeros((0,) + ir.shape[1:3] + (2,), dtype=np.float32)
    masks_dir = os.path.join(root, "masks")
    masks = None
    if os.path.isdir(masks_dir):
        masks = np.stack(
            [read_tensor(os.path.join(masks_dir, f"{i:05}.tct")) for i in range(N)]
        )
    H, W = int(manifest["H"]), int(manifest["W"])
    L = int(manifest["L"])
    if ir.shape[1:3] != (H, W) or logits.shape[-1] != L:
        raise LengthMismatch(
            f"manifest says {H}x{W}, L={L}; files are {ir.shape[1:3]}, L={logits.shape[-1]}"
        )
    return Dataset(ir=ir, vis=vis, logits=logits, flows=flows, masks=masks, manifest=manifest)


def load_frames_dir(root) -> np.ndarray:
    """Load every PNG in a directory (sorted) into one (N, H, W, C) uint8 stack."""
    root = os.fspath(root)
    names = sorted(n for n in os.listdir(root) if n.endswith(".png"))
    if not names:
        raise LengthMismatch(f"no PNG frames under {root}")
    return np.stack([read_png(os.path.join(root, n)) for n in names])


def _fit_velocity(desired: int, lo: int, hi: int, extent: int, steps: int) -> int:
    """Clamp a per-frame velocity so [lo, hi] stays inside [0, extent) for
    `steps` moves."""
    if steps == 0:
        return 0
    max_fwd = (extent - 1 - hi) // steps
    max_back = lo // steps
    return int(np.clip(desired, -max_back, max_fwd))


def make_scene_config(
    preset: str,
    height: int,
    width: int,
    n_frames: int,
    num_categories: int,
    tau: float = 0.25,
    noise: float = 0.0,
    seed: int = 0,
) -> SyntheticSceneConfig:
    """Named scene presets with trajectories clamped to stay in frame.

    "two_shapes": a rectangle drifting right and a disk drifting down-left
    (needs L >= 3); "three_shapes" adds a second rectangle drifting up
    (needs L >= 4). Shape supports are disjoint so the emitted flow warps
    ground-truth masks exactly.
    """
    H, W, N = height, width, n_frames
    steps = max(N - 1, 1)
    rect_h, rect_w = max(H // 4, 2), max(W // 5, 2)
    rect_u, rect_v = H // 10, W // 16
    rect_dv = _fit_velocity(2, rect_v, rect_v + rect_w - 1, W, steps)
    radius = max(min(H, W) // 8, 2)
    disk_u, disk_v = H - 1 - radius - H // 10, W - 1 - radius - W // 10
    disk_du = _fit_velocity(1, disk_u - radius, disk_u + radius, H, steps)
    disk_dv = _fit_velocity(-2, disk_v - radius, disk_v + radius, W, steps)
    shapes = [
        ShapeSpec(
            kind="rectangle",
            size=(rect_h, rect_w),
            start=(rect_u, rect_v),
            velocity=(0, rect_dv),
            color=(0.85, 0.3, 0.2),
            ir_intensity=0.8,
            category=1,
        ),
        ShapeSpec(
            kind="disk",
            size=(radius,),
            start=(disk_u, disk_v),
            velocity=(disk_du, disk_dv),
            color=(0.2, 0.45, 0.85),
            ir_intensity=0.55,
            category=2,
        ),
    ]
    if preset == "two_shapes":
        pass
    elif preset == "three_shapes":
        h2, w2 = max(H // 8, 2), max(W // 8, 2)
        u2 = H - 1 - h2 - H // 16
        v2 = W // 2 - w2 // 2
        du2 = _fit_velocity(-1, u2, u2 + h2 - 1, H, steps)
        # keep it clear of the rectangle band at the top
        du2 = max(du2, -(max(u2 - (rect_u + rect_h + 1), 0) // steps))
        shapes.append(
            ShapeSpec(
                kind="rectangle",
                size=(h2, w2),
                start=(u2, v2),
                velocity=(du2, 0),
                color=(0.3, 0.8, 0.35),
                ir_intensity=0.95,
                category=3,
            )
        )
    else:
        raise InvalidConfig(f"unknown scene preset {preset!r}")
    needed = max(sh.category for sh in shapes) + 1
    if num_categories < needed:
        raise InvalidConfig(
            f"preset {preset!r} needs at least {needed} categories, got {num_categories}"
        )
    return SyntheticSceneConfig(
        height=H,
        width=W,
        n_frames=N,
        shapes=tuple(shapes),
        num_categories=num_categories,
        tau=tau,
        noise=noise,
        seed=seed,
    )

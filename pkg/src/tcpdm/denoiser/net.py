"""Conditional noise-prediction network: a reduced U-Net over patch tensors.

The network consumes the channel concatenation [visible(3) | infrared | logits]
plus a sinusoidal timestep embedding injected into every residual block, and
predicts the visible-channel noise. Parameters live in one flat vector with a
name -> (offset, shape) index; gradients are computed by hand-written
reverse-mode adjoints (see layers.py), which keeps the whole trainer free of
external frameworks and bit-reproducible.

Architecture, for depth d and base width w (chs[l] = w * 2**l):

    time.fc1, time.fc2      Linear(D -> D) pair around a SiLU
    in.conv                 3x3 conv, C_in -> chs[0]
    enc{l}.res              ResBlock(chs[l] -> chs[l]),      l = 0..d-1
    enc{l}.down             3x3 stride-2 conv, chs[l] -> chs[l+1]
    mid.res1 [mid.attn] mid.res2   ResBlocks at chs[d] (+ optional attention)
    dec{l}.up               nearest x2 then 3x3 conv, chs[l+1] -> chs[l]
    dec{l}.res              ResBlock(2*chs[l] -> chs[l]) on the skip concat
    out.norm, out.conv      GroupNorm + SiLU + 3x3 conv, chs[0] -> 3

A ResBlock(cin -> cout) is norm/SiLU/conv3x3, plus a learned per-channel bias
projected from the timestep embedding, then norm/SiLU/conv3x3, added to a 1x1
projection of the input (identity when cin == cout).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidConfig, OddDimension, ShapeMismatch
from . import layers as L


@dataclass(frozen=True)
class DenoiserConfig:
    patch_size: int
    logit_channels: int
    ir_channels: int = 1
    ir_replicate_3: bool = False
    base_width: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    use_attention: bool = False
    num_groups: int = 8

    @property
    def in_channels(self) -> int:
        ir = 3 if self.ir_replicate_3 else self.ir_channels
        return 3 + ir + self.logit_channels

    @property
    def widths(self) -> tuple:
        return tuple(self.base_width * 2**l for l in range(self.depth + 1))

    def validate(self) -> None:
        if self.patch_size % (2**self.depth) != 0:
            raise InvalidConfig(
                f"patch_size {self.patch_size} not divisible by 2^depth={2**self.depth}"
            )
        if self.base_width % self.num_groups != 0:
            raise InvalidConfig(
                f"base_width {self.base_width} not divisible by num_groups={self.num_groups}"
            )
        if self.time_embed_dim % 2 != 0:
            raise OddDimension(f"time_embed_dim {self.time_embed_dim} must be even")
        if min(self.patch_size, self.logit_channels, self.ir_channels, self.depth) < 1:
            raise InvalidConfig("patch_size, channels and depth must be >= 1")


def _resblock_spec(prefix: str, cin: int, cout: int, D: int) -> list:
    spec = [
        (f"{prefix}.norm1.g", (cin,), "gamma"),
        (f"{prefix}.norm1.b", (cin,), "bias"),
        (f"{prefix}.conv1.w", (3, 3, cin, cout), "conv"),
        (f"{prefix}.conv1.b", (cout,), "bias"),
        (f"{prefix}.temb.w", (D, cout), "linear"),
        (f"{prefix}.temb.b", (cout,), "bias"),
        (f"{prefix}.norm2.g", (cout,), "gamma"),
        (f"{prefix}.norm2.b", (cout,), "bias"),
        (f"{prefix}.conv2.w", (3, 3, cout, cout), "conv"),
        (f"{prefix}.conv2.b", (cout,), "bias"),
    ]
    if cin != cout:
        spec += [
            (f"{prefix}.skip.w", (1, 1, cin, cout), "conv"),
            (f"{prefix}.skip.b", (cout,), "bias"),
        ]
    return spec


def param_spec(cfg: DenoiserConfig) -> list:
    """Ordered (name, shape, init_kind) triples defining the flat layout."""
    D = cfg.time_embed_dim
    chs = cfg.widths
    spec = [
        ("time.fc1.w", (D, D), "linear"),
        ("time.fc1.b", (D,), "bias"),
        ("time.fc2.w", (D, D), "linear"),
        ("time.fc2.b", (D,), "bias"),
        ("in.conv.w", (3, 3, cfg.in_channels, chs[0]), "conv"),
        ("in.conv.b", (chs[0],), "bias"),
    ]
    for l in range(cfg.depth):
        spec += _resblock_spec(f"enc{l}.res", chs[l], chs[l], D)
        spec += [
            (f"enc{l}.down.w", (3, 3, chs[l], chs[l + 1]), "conv"),
            (f"enc{l}.down.b", (chs[l + 1],), "bias"),
        ]
    spec += _resblock_spec("mid.res1", chs[-1], chs[-1], D)
    if cfg.use_attention:
        c = chs[-1]
        spec += [
            ("mid.attn.norm.g", (c,), "gamma"),
            ("mid.attn.norm.b", (c,), "bias"),
            ("mid.attn.q.w", (c, c), "linear"),
            ("mid.attn.k.w", (c, c), "linear"),
            ("mid.attn.v.w", (c, c), "linear"),
            ("mid.attn.proj.w", (c, c), "linear"),
            ("mid.attn.proj.b", (c,), "bias"),
        ]
    spec += _resblock_spec("mid.res2", chs[-1], chs[-1], D)
    for l in reversed(range(cfg.depth)):
        spec += [
            (f"dec{l}.up.w", (3, 3, chs[l + 1], chs[l]), "conv"),
            (f"dec{l}.up.b", (chs[l],), "bias"),
        ]
        spec += _resblock_spec(f"dec{l}.res", 2 * chs[l], chs[l], D)
    spec += [
        ("out.norm.g", (chs[0],), "gamma"),
        ("out.norm.b", (chs[0],), "bias"),
        ("out.conv.w", (3, 3, chs[0], 3), "conv"),
        ("out.conv.b", (3,), "bias"),
    ]
    return spec


def build_index(cfg: DenoiserConfig):
    index = {}
    offset = 0
    for name, shape, kind in param_spec(cfg):
        size = int(np.prod(shape))
        index[name] = (offset, shape, kind)
        offset += size
    return index, offset


@dataclass
class DenoiserParams:
    """Flat parameter vector with its layout index and an EMA shadow."""

    config: DenoiserConfig
    index: dict
    values: np.ndarray
    ema_values: np.ndarray

    @property
    def size(self) -> int:
        return self.values.size

    def view(self, name: str, ema: bool = False) -> np.ndarray:
        offset, shape, _ = self.index[name]
        vec = self.ema_values if ema else self.values
        return vec[offset : offset + int(np.prod(shape))].reshape(shape)

    def views(self, ema: bool = False) -> dict:
        return {name: self.view(name, ema) for name in self.index}


def flat_views(values: np.ndarray, index: dict) -> dict:
    out = {}
    for name, (offset, shape, _) in index.items():
        out[name] = values[offset : offset + int(np.prod(shape))].reshape(shape)
    return out


def build_denoiser(
    cfg: DenoiserConfig, rng: np.random.Generator, dtype=np.float32
) -> DenoiserParams:
    """Initialize parameters (He fan-in for conv/linear weights, zero biases,
    unit norm scales); the EMA shadow starts equal to the parameters."""
    cfg.validate()
    index, total = build_index(cfg)
    values = np.zeros(total, dtype=dtype)
    views = flat_views(values, index)
    for name, shape, kind in param_spec(cfg):
        if kind == "conv":
            fan_in = shape[0] * shape[1] * shape[2]
            views[name][...] = (
                rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            ).astype(dtype)
        elif kind == "linear":
            fan_in = shape[0]
            views[name][...] = (
                rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            ).astype(dtype)
        elif kind == "gamma":
            views[name][...] = 1.0
        # biases stay zero
    return DenoiserParams(
        config=cfg, index=index, values=values, ema_values=values.copy()
    )


def sinusoidal_embedding(t: int, dim: int) -> np.ndarray:
    """Fixed timestep embedding: pairs (sin, cos) of t / 10000**(2k/dim)."""
    if dim % 2 != 0:
        raise OddDimension(f"dim must be even, got {dim}")
    if t < 0:
        raise OddDimension(f"t must be >= 0, got {t}")
    k = np.arange(dim // 2, dtype=np.float64)
    freq = t / np.power(10000.0, 2.0 * k / dim)
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(freq)
    out[1::2] = np.cos(freq)
    return out


def sinusoidal_embedding_batch(t: np.ndarray, dim: int, dtype=np.float64) -> np.ndarray:
    if dim % 2 != 0:
        raise OddDimension(f"dim must be even, got {dim}")
    k = np.arange(dim // 2, dtype=np.float64)
    freq = np.asarray(t, dtype=np.float64)[:, None] / np.power(10000.0, 2.0 * k / dim)
    out = np.empty((len(t), dim), dtype=np.float64)
    out[:, 0::2] = np.sin(freq)
    out[:, 1::2] = np.cos(freq)
    return out.astype(dtype, copy=False)


def _concat_input(cfg: DenoiserConfig, x, y, s) -> np.ndarray:
    p = cfg.patch_size
    if x.shape[1:] != (p, p, 3):
        raise ShapeMismatch(f"x patches must be (B,{p},{p},3), got {x.shape}")
    if y.shape[1:3] != (p, p) or s.shape[1:3] != (p, p):
        raise ShapeMismatch(f"conditioning size mismatch: {y.shape}, {s.shape}")
    if s.shape[3] != cfg.logit_channels:
        raise ShapeMismatch(
            f"logit channels {s.shape[3]} != configured {cfg.logit_channels}"
        )
    if y.shape[3] != cfg.ir_channels:
        raise ShapeMismatch(
            f"ir channels {y.shape[3]} != configured {cfg.ir_channels}"
        )
    if cfg.ir_replicate_3 and y.shape[3] == 1:
        y = np.repeat(y, 3, axis=3)
    return np.concatenate([x, y, s], axis=3)


def _resblock_fwd(v, prefix, x, emb_silu, groups, want_cache):
    c = {}
    h, c["n1"] = L.groupnorm_fwd(x, v[f"{prefix}.norm1.g"], v[f"{prefix}.norm1.b"], groups)
    h, c["s1"] = L.silu_fwd(h)
    h, c["c1"] = L.conv2d_fwd(h, v[f"{prefix}.conv1.w"], v[f"{prefix}.conv1.b"], 1, 1)
    tb, c["t"] = L.linear_fwd(emb_silu, v[f"{prefix}.temb.w"], v[f"{prefix}.temb.b"])
    h = h + tb[:, None, None, :]
    h2, c["n2"] = L.groupnorm_fwd(h, v[f"{prefix}.norm2.g"], v[f"{prefix}.norm2.b"], groups)
    h2, c["s2"] = L.silu_fwd(h2)
    h2, c["c2"] = L.conv2d_fwd(h2, v[f"{prefix}.conv2.w"], v[f"{prefix}.conv2.b"], 1, 1)
    has_skip = f"{prefix}.skip.w" in v
    if has_skip:
        xs, c["sk"] = L.conv2d_fwd(x, v[f"{prefix}.skip.w"], v[f"{prefix}.skip.b"], 1, 0)
    else:
        xs = x
    return xs + h2, (c if want_cache else None)


def _resblock_bwd(g, prefix, c, dout):
    """Returns (dx, d_emb_silu); parameter grads accumulate into g views."""
    dh2, dw, db = L.conv2d_bwd(dout, c["c2"])
    g[f"{prefix}.conv2.w"] += dw
    g[f"{prefix}.conv2.b"] += db
    dh2 = L.silu_bwd(dh2, c["s2"])
    dh, dgam, dbet = L.groupnorm_bwd(dh2, c["n2"])
    g[f"{prefix}.norm2.g"] += dgam
    g[f"{prefix}.norm2.b"] += dbet
    dtb = dh.sum(axis=(1, 2))
    demb, dw, db = L.linear_bwd(dtb, c["t"])
    g[f"{prefix}.temb.w"] += dw
    g[f"{prefix}.temb.b"] += db
    dh1, dw, db = L.conv2d_bwd(dh, c["c1"])
    g[f"{prefix}.conv1.w"] += dw
    g[f"{prefix}.conv1.b"] += db
    dh1 = L.silu_bwd(dh1, c["s1"])
    dx, dgam, dbet = L.groupnorm_bwd(dh1, c["n1"])
    g[f"{prefix}.norm1.g"] += dgam
    g[f"{prefix}.norm1.b"] += dbet
    if "sk" in c:
        dxs, dw, db = L.conv2d_bwd(dout, c["sk"])
        g[f"{prefix}.skip.w"] += dw
        g[f"{prefix}.skip.b"] += db
        dx = dx + dxs
    else:
        dx = dx + dout
    return dx, demb


def net_forward(
    values: np.ndarray,
    cfg: DenoiserConfig,
    index: dict,
    x: np.ndarray,
    y: np.ndarray,
    s: np.ndarray,
    t: np.ndarray,
    want_cache: bool = False,
):
    """Full forward pass on batched patches; t is an integer array (B,).

    Returns (eps_pred, cache); the cache is None unless requested for a
    subsequent net_backward.
    """
    v = flat_views(values, index)
    dtype = values.dtype
    inp = _concat_input(cfg, x, y, s).astype(dtype, copy=False)
    G = cfg.num_groups

    emb0 = sinusoidal_embedding_batch(t, cfg.time_embed_dim, dtype)
    e1, c_fc1 = L.linear_fwd(emb0, v["time.fc1.w"], v["time.fc1.b"])
    e1s, c_es1 = L.silu_fwd(e1)
    emb, c_fc2 = L.linear_fwd(e1s, v["time.fc2.w"], v["time.fc2.b"])
    emb_silu, c_es2 = L.silu_fwd(emb)

    h, c_in = L.conv2d_fwd(inp, v["in.conv.w"], v["in.conv.b"], 1, 1)
    skips = []
    enc = []
    for l in range(cfg.depth):
        h, c_res = _resblock_fwd(v, f"enc{l}.res", h, emb_silu, G, want_cache)
        skips.append(h)
        h, c_down = L.conv2d_fwd(
            h, v[f"enc{l}.down.w"], v[f"enc{l}.down.b"], stride=2, pad=1
        )
        enc.append((c_res, c_down))

    h, c_m1 = _resblock_fwd(v, "mid.res1", h, emb_silu, G, want_cache)
    c_attn = None
    if cfg.use_attention:
        hn, c_an = L.groupnorm_fwd(h, v["mid.attn.norm.g"], v["mid.attn.norm.b"], G)
        ha, c_at = L.attention_fwd(
            hn,
            v["mid.attn.q.w"], v["mid.attn.k.w"], v["mid.attn.v.w"],
            v["mid.attn.proj.w"], v["mid.attn.proj.b"],
        )
        h = h + ha
        c_attn = (c_an, c_at)
    h, c_m2 = _resblock_fwd(v, "mid.res2", h, emb_silu, G, want_cache)

    dec = []
    for l in reversed(range(cfg.depth)):
        h, up_shape = L.upsample2_fwd(h)
        h, c_up = L.conv2d_fwd(h, v[f"dec{l}.up.w"], v[f"dec{l}.up.b"], 1, 1)
        h = np.concatenate([h, skips[l]], axis=3)
        h, c_res = _resblock_fwd(v, f"dec{l}.res", h, emb_silu, G, want_cache)
        dec.append((up_shape, c_up, c_res))

    h, c_on = L.groupnorm_fwd(h, v["out.norm.g"], v["out.norm.b"], G)
    h, c_os = L.silu_fwd(h)
    out, c_oc = L.conv2d_fwd(h, v["out.conv.w"], v["out.conv.b"], 1, 1)

    if not want_cache:
        return out, None
    cache = dict(
        fc1=c_fc1, es1=c_es1, fc2=c_fc2, es2=c_es2, conv_in=c_in,
        enc=enc, mid1=c_m1, attn=c_attn, mid2=c_m2, dec=dec,
        out_norm=c_on, out_silu=c_os, out_conv=c_oc,
    )
    return out, cache


def net_backward(
    cfg: DenoiserConfig, index: dict, cache: dict, d_out: np.ndarray, dtype
) -> np.ndarray:
    """Backpropagate d(loss)/d(eps_pred) to a flat parameter gradient."""
    total = sum(int(np.prod(shape)) for _, (_, shape, _) in index.items())
    grad = np.zeros(total, dtype=dtype)
    g = flat_views(grad, index)
    G = cfg.num_groups

    dh, dw, db = L.conv2d_bwd(d_out, cache["out_conv"])
    g["out.conv.w"] += dw
    g["out.conv.b"] += db
    dh = L.silu_bwd(dh, cache["out_silu"])
    dh, dgam, dbet = L.groupnorm_bwd(dh, cache["out_norm"])
    g["out.norm.g"] += dgam
    g["out.norm.b"] += dbet

    demb_silu = 0.0
    dskips = [None] * cfg.depth
    # walk decoder levels in reverse of forward order (forward went high->low)
    for entry_idx in range(cfg.depth - 1, -1, -1):
        up_shape, c_up, c_res = cache["dec"][entry_idx]
        level = cfg.depth - 1 - entry_idx  # forward pushed levels d-1..0
        dh, de = _resblock_bwd(g, f"dec{level}.res", c_res, dh)
        demb_silu = demb_silu + de
        ch = dh.shape[3] // 2
        dskips[level] = dh[..., ch:]
        dh, dw, db = L.conv2d_bwd(np.ascontiguousarray(dh[..., :ch]), c_up)
        g[f"dec{level}.up.w"] += dw
        g[f"dec{level}.up.b"] += db
        dh = L.upsample2_bwd(dh, up_shape)

    dh, de = _resblock_bwd(g, "mid.res2", cache["mid2"], dh)
    demb_silu = demb_silu + de
    if cfg.use_attention:
        c_an, c_at = cache["attn"]
        dha, dwq, dwk, dwv, dwp, dbp = L.attention_bwd(dh, c_at)
        g["mid.attn.q.w"] += dwq
        g["mid.attn.k.w"] += dwk
        g["mid.attn.v.w"] += dwv
        g["mid.attn.proj.w"] += dwp
        g["mid.attn.proj.b"] += dbp
        dhn, dgam, dbet = L.groupnorm_bwd(dha, c_an)
        g["mid.attn.norm.g"] += dgam
        g["mid.attn.norm.b"] += dbet
        dh = dh + dhn
    dh, de = _resblock_bwd(g, "mid.res1", cache["mid1"], dh)
    demb_silu = demb_silu + de

    for l in range(cfg.depth - 1, -1, -1):
        c_res, c_down = cache["enc"][l]
        dh, dw, db = L.conv2d_bwd(dh, c_down)
        g[f"enc{l}.down.w"] += dw
        g[f"enc{l}.down.b"] += db
        dh = dh + dskips[l]
        dh, de = _resblock_bwd(g, f"enc{l}.res", c_res, dh)
        demb_silu = demb_silu + de

    _, dw, db = L.conv2d_bwd(dh, cache["conv_in"])
    g["in.conv.w"] += dw
    g["in.conv.b"] += db

    demb = L.silu_bwd(demb_silu, cache["es2"])
    de1s, dw, db = L.linear_bwd(demb, cache["fc2"])
    g["time.fc2.w"] += dw
    g["time.fc2.b"] += db
    de1 = L.silu_bwd(de1s, cache["es1"])
    _, dw, db = L.linear_bwd(de1, cache["fc1"])
    g["time.fc1.w"] += dw
    g["time.fc1.b"] += db
    return grad


def predict_noise_batch(
    params: DenoiserParams,
    x: np.ndarray,
    y: np.ndarray,
    s: np.ndarray,
    t: np.ndarray,
    use_ema: bool = False,
    max_chunk: int = 64,
) -> np.ndarray:
    """Deterministic forward pass on a batch of patch triples.

    Large batches are processed in chunks to bound the transient column-matrix
    memory; chunking does not change the result.
    """
    values = params.ema_values if use_ema else params.values
    B = x.shape[0]
    if B <= max_chunk:
        out, _ = net_forward(values, params.config, params.index, x, y, s, t)
        return out
    pieces = []
    for lo in range(0, B, max_chunk):
        hi = min(lo + max_chunk, B)
        out, _ = net_forward(
            values, params.config, params.index, x[lo:hi], y[lo:hi], s[lo:hi], t[lo:hi]
        )
        pieces.append(out)
    return np.concatenate(pieces, axis=0)


def predict_noise(
    params: DenoiserParams,
    x_patch: np.ndarray,
    y_patch: np.ndarray,
    s_patch: np.ndarray,
    t: int,
    use_ema: bool = False,
) -> np.ndarray:
    """Single-patch convenience wrapper around predict_noise_batch."""
    out = predict_noise_batch(
        params,
        x_patch[None],
        y_patch[None],
        s_patch[None],
        np.array([t], dtype=np.int64),
        use_ema=use_ema,
    )
    return out[0]


def as_batch_denoiser(params: DenoiserParams, use_ema: bool = False, max_chunk: int = 64):
    """Adapter making DenoiserParams usable wherever a callable denoiser is expected."""

    def _denoise(x, y, s, t):
        return predict_noise_batch(params, x, y, s, t, use_ema=use_ema, max_chunk=max_chunk)

    return _denoise

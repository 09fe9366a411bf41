"""Training machinery: exact loss gradients, Adam, EMA, checkpoints."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..data_io import read_manifest, read_tensor, write_manifest, write_tensor
from ..diffusion import NoiseSchedule, forward_sample
from ..errors import ConfigMismatch, EmptyBatch, NonFiniteLoss, ShapeMismatch
from .net import DenoiserConfig, DenoiserParams, build_index, net_backward, net_forward


@dataclass
class OptimizerState:
    """Adam moments over the flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: DenoiserParams, lr: float = 1e-3) -> "OptimizerState":
        return cls(
            m=np.zeros_like(params.values), v=np.zeros_like(params.values), lr=lr
        )


def loss_and_grad(
    values: np.ndarray,
    cfg: DenoiserConfig,
    index: dict,
    x0: np.ndarray,
    y: np.ndarray,
    s: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
    schedule: NoiseSchedule,
    want_grad: bool = True,
):
    """Noise-prediction MSE and its exact parameter gradient.

    Deterministic in (values, batch, t, eps); the stochastic draws happen in
    train_step. Gradient checking perturbs `values` and calls this with
    want_grad=False.
    """
    x_t = forward_sample(x0, t, eps, schedule).astype(values.dtype, copy=False)
    eps = eps.astype(values.dtype, copy=False)
    out, cache = net_forward(
        values, cfg, index, x_t, y, s, t, want_cache=want_grad
    )
    diff = out - eps
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    if not want_grad:
        return loss, None
    d_out = (2.0 / diff.size) * diff
    grad = net_backward(cfg, index, cache, d_out.astype(values.dtype), values.dtype)
    return loss, grad


def adam_update(values: np.ndarray, grad: np.ndarray, opt: OptimizerState) -> None:
    """One bias-corrected Adam step, in place."""
    opt.step += 1
    opt.m += (1.0 - opt.beta1) * (grad - opt.m)
    opt.v += (1.0 - opt.beta2) * (grad * grad - opt.v)
    mhat = opt.m / (1.0 - opt.beta1**opt.step)
    vhat = opt.v / (1.0 - opt.beta2**opt.step)
    values -= (opt.lr * mhat / (np.sqrt(vhat) + opt.eps)).astype(values.dtype)


def train_step(
    params: DenoiserParams,
    opt: OptimizerState,
    batch,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
):
    """One optimization step on a batch of (x0, ir, logits) patch triples.

    Samples t ~ U[1, T] for the batch and eps ~ N(0, I) per patch, computes
    the noise-prediction loss and exact gradients, and applies one Adam
    update in place. Returns (params, opt, pre-update loss).

    Raises NonFiniteLoss when the loss diverges; parameters are then left
    untouched so the caller can fall back to the last good state.
    """
    x0, y, s = batch
    if x0.shape[0] == 0:
        raise EmptyBatch("empty training batch")
    if not (x0.shape[0] == y.shape[0] == s.shape[0]):
        raise ShapeMismatch(
            f"batch components disagree: {x0.shape[0]}/{y.shape[0]}/{s.shape[0]}"
        )
    B = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(x0.shape).astype(params.values.dtype, copy=False)
    loss, grad = loss_and_grad(
        params.values, params.config, params.index, x0, y, s, t, eps, schedule
    )
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NonFiniteLoss(f"loss diverged: {loss}")
    adam_update(params.values, grad, opt)
    return params, opt, loss


def ema_update(ema: np.ndarray, params: np.ndarray, momentum: float) -> np.ndarray:
    """ema' = momentum * ema + (1 - momentum) * params, elementwise."""
    if ema.shape != params.shape:
        raise ShapeMismatch(f"ema {ema.shape} vs params {params.shape}")
    if not 0.0 <= momentum <= 1.0:
        raise ShapeMismatch(f"momentum {momentum} outside [0, 1]")
    return (momentum * ema + (1.0 - momentum) * params).astype(ema.dtype)


_CKPT_FORMAT = "tcpdm-checkpoint-1"


def save_checkpoint(
    path, params: DenoiserParams, opt: OptimizerState, extra: dict | None = None
) -> None:
    """Write params, EMA shadow, optimizer moments and config; bit-exact.

    `extra` entries (e.g. the training schedule) are merged into the manifest.
    """
    os.makedirs(path, exist_ok=True)
    write_tensor(os.path.join(path, "params.tct"), params.values)
    write_tensor(os.path.join(path, "ema.tct"), params.ema_values)
    write_tensor(os.path.join(path, "adam_m.tct"), opt.m)
    write_tensor(os.path.join(path, "adam_v.tct"), opt.v)
    cfg = params.config
    entries = {
        "format": _CKPT_FORMAT,
        "patch_size": cfg.patch_size,
        "logit_channels": cfg.logit_channels,
        "ir_channels": cfg.ir_channels,
        "ir_replicate_3": cfg.ir_replicate_3,
        "base_width": cfg.base_width,
        "depth": cfg.depth,
        "time_embed_dim": cfg.time_embed_dim,
        "use_attention": cfg.use_attention,
        "num_groups": cfg.num_groups,
        "opt_step": opt.step,
        "opt_lr": repr(opt.lr),
    }
    if extra:
        entries.update(extra)
    write_manifest(os.path.join(path, "manifest.txt"), entries)


def _as_bool(text: str) -> bool:
    return text.strip().lower() in ("true", "1", "yes")


def load_checkpoint(path):
    """Read a checkpoint directory back into (params, optimizer, manifest)."""
    manifest = read_manifest(os.path.join(path, "manifest.txt"))
    if manifest.get("format") != _CKPT_FORMAT:
        raise ConfigMismatch(f"{path}: not a checkpoint (format={manifest.get('format')})")
    cfg = DenoiserConfig(
        patch_size=int(manifest["patch_size"]),
        logit_channels=int(manifest["logit_channels"]),
        ir_channels=int(manifest["ir_channels"]),
        ir_replicate_3=_as_bool(manifest["ir_replicate_3"]),
        base_width=int(manifest["base_width"]),
        depth=int(manifest["depth"]),
        time_embed_dim=int(manifest["time_embed_dim"]),
        use_attention=_as_bool(manifest["use_attention"]),
        num_groups=int(manifest["num_groups"]),
    )
    index, total = build_index(cfg)
    values = read_tensor(os.path.join(path, "params.tct"))
    ema = read_tensor(os.path.join(path, "ema.tct"))
    if values.size != total:
        raise ConfigMismatch(
            f"{path}: parameter vector has {values.size} entries, config needs {total}"
        )
    params = DenoiserParams(config=cfg, index=index, values=values, ema_values=ema)
    opt = OptimizerState(
        m=read_tensor(os.path.join(path, "adam_m.tct")),
        v=read_tensor(os.path.join(path, "adam_v.tct")),
        step=int(manifest["opt_step"]),
        lr=float(manifest["opt_lr"]),
    )
    return params, opt, manifest

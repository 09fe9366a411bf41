"""Conditional noise-prediction network, trainer, and checkpoints."""

from .net import (
    DenoiserConfig,
    DenoiserParams,
    as_batch_denoiser,
    build_denoiser,
    build_index,
    param_spec,
    predict_noise,
    predict_noise_batch,
    sinusoidal_embedding,
    sinusoidal_embedding_batch,
    net_forward,
    net_backward,
)
from .train import (
    OptimizerState,
    adam_update,
    ema_update,
    load_checkpoint,
    loss_and_grad,
    save_checkpoint,
    train_step,
)

__all__ = [
    "DenoiserConfig",
    "DenoiserParams",
    "OptimizerState",
    "adam_update",
    "as_batch_denoiser",
    "build_denoiser",
    "build_index",
    "ema_update",
    "load_checkpoint",
    "loss_and_grad",
    "net_backward",
    "net_forward",
    "param_spec",
    "predict_noise",
    "predict_noise_batch",
    "save_checkpoint",
    "sinusoidal_embedding",
    "sinusoidal_embedding_batch",
    "train_step",
]

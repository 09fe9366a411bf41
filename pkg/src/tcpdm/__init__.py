"""Patch-level conditional diffusion for infrared-to-visible video translation.

Library layout:
  diffusion   noise schedule, forward/reverse steps, training objective
  denoiser    conditional noise-prediction U-Net, trainer, checkpoints
  patches     patch decomposition, per-patch denoising, spatial blending
  temporal    flow correspondences, RANSAC verification, temporal blending
  data_io     tensor container, PNG/color conversion, synthetic scenes
  metrics     PSNR / SSIM / warped-frame error
  cli         synth / train / translate / eval commands
"""

__version__ = "0.1.0"

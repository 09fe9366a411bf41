"""Command-line entry point: synth / train / translate / eval.

Heavy imports happen inside the command handlers so that --threads can pin
the BLAS pool size via environment variables before numpy loads. Exit codes:
0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys


class _UsageExit(SystemExit):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tcpdm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed", type=int, help="seed override for this command")
        p.add_argument("--threads", type=int, help="BLAS thread count")
        p.add_argument("--out", help="output directory")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )

    common(sub.add_parser("synth", help="generate a synthetic paired dataset"))
    common(sub.add_parser("train", help="train the conditional denoiser"))
    common(sub.add_parser("translate", help="translate infrared frames to visible"))
    p_eval = sub.add_parser("eval", help="score generated frames against a reference")
    common(p_eval)
    p_eval.add_argument("--generated", help="directory of generated PNG frames")
    p_eval.add_argument("--reference", help="directory of reference PNG frames")
    p_eval.add_argument("--flows", help="directory of flow .tct files")
    return parser


def _pin_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def cmd_synth(cfg, out_dir: str) -> None:
    from .config import write_resolved
    from .data_io import make_scene_config, save_dataset, synth_scene

    scene_cfg = make_scene_config(
        cfg.synth.scene,
        cfg.synth.H,
        cfg.synth.W,
        cfg.synth.N,
        cfg.synth.L,
        tau=cfg.synth.tau,
        noise=cfg.synth.noise,
        seed=cfg.synth.seed,
    )
    scene = synth_scene(scene_cfg)
    save_dataset(out_dir, scene)
    write_resolved(cfg, out_dir)
    print(f"dataset: {scene.ir.shape[0]} frames of "
          f"{scene.ir.shape[1]}x{scene.ir.shape[2]} under {out_dir}")


def cmd_train(cfg, out_dir: str) -> None:
    import csv

    import numpy as np

    from .config import write_resolved
    from .data_io import load_dataset
    from .denoiser import (
        DenoiserConfig,
        OptimizerState,
        build_denoiser,
        ema_update,
        save_checkpoint,
        train_step,
    )
    from .diffusion import make_linear_schedule
    from .errors import ConfigMismatch, NonFiniteLoss
    from .figures import save_loss_curve
    from .patches import random_patch_batch

    dataset = load_dataset(cfg.paths.dataset)
    L = int(dataset.manifest["L"])
    if cfg.denoiser.L != L:
        raise ConfigMismatch(
            f"dataset has L={L} categories but config says denoiser.L={cfg.denoiser.L}"
        )
    schedule = make_linear_schedule(
        cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end,
        cfg.schedule.sigma_mode,
    )
    net_cfg = DenoiserConfig(
        patch_size=cfg.patch.p,
        logit_channels=L,
        ir_channels=1,
        ir_replicate_3=cfg.denoiser.ir_replicate_3,
        base_width=cfg.denoiser.base_width,
        depth=cfg.denoiser.depth,
        time_embed_dim=cfg.denoiser.time_embed_dim,
        use_attention=cfg.denoiser.use_attention,
        num_groups=cfg.denoiser.num_groups,
    )
    rng = np.random.default_rng(cfg.train.seed)
    params = build_denoiser(net_cfg, rng)
    opt = OptimizerState.for_params(params, lr=cfg.train.lr)
    vis, ir, logits = dataset.model_arrays()

    schedule_meta = {
        "schedule_T": cfg.schedule.T,
        "schedule_beta_start": repr(cfg.schedule.beta_start),
        "schedule_beta_end": repr(cfg.schedule.beta_end),
        "schedule_sigma_mode": cfg.schedule.sigma_mode,
    }
    ckpt_dir = cfg.paths.checkpoint
    losses = []
    aborted = False
    for it in range(cfg.train.iters):
        batch = random_patch_batch(
            vis, ir, logits, cfg.train.n_images, cfg.train.patches_per_image,
            cfg.patch.p, rng,
        )
        try:
            params, opt, loss = train_step(params, opt, batch, schedule, rng)
        except NonFiniteLoss as exc:
            print(f"aborting at iteration {it}: {exc}", file=sys.stderr)
            aborted = True
            break
        params.ema_values = ema_update(
            params.ema_values, params.values, cfg.train.ema_momentum
        )
        losses.append(loss)
        if cfg.train.checkpoint_interval > 0 and (it + 1) % cfg.train.checkpoint_interval == 0:
            save_checkpoint(ckpt_dir, params, opt, schedule_meta)
    if not aborted:
        save_checkpoint(ckpt_dir, params, opt, schedule_meta)

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "loss_curve.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "loss"])
        for it, loss in enumerate(losses):
            writer.writerow([it, repr(loss)])
    save_loss_curve(losses, os.path.join(out_dir, "loss_curve.png"))
    write_resolved(cfg, out_dir)
    if aborted:
        raise NonFiniteLoss("training aborted; last good checkpoint retained")
    final = losses[-1] if losses else float("nan")
    print(f"trained {len(losses)} iterations, final loss {final:.6f}; "
          f"checkpoint at {ckpt_dir}")


def cmd_translate(cfg, out_dir: str) -> None:
    import numpy as np

    from .config import write_resolved
    from .data_io import from_model_range, load_dataset, to_model_range, write_png
    from .denoiser import as_batch_denoiser, load_checkpoint
    from .diffusion import make_linear_schedule
    from .errors import ConfigMismatch
    from .temporal import RansacConfig, TranslateConfig, translate_video

    dataset = load_dataset(cfg.paths.dataset)
    params, _, manifest = load_checkpoint(cfg.paths.checkpoint)
    L = int(dataset.manifest["L"])
    if params.config.logit_channels != L:
        raise ConfigMismatch(
            f"checkpoint expects L={params.config.logit_channels}, dataset has L={L}"
        )
    if params.config.patch_size != cfg.patch.p:
        raise ConfigMismatch(
            f"checkpoint patch size {params.config.patch_size} != patch.p {cfg.patch.p}"
        )
    # sampling keeps the training-time schedule
    schedule = make_linear_schedule(
        int(manifest.get("schedule_T", cfg.schedule.T)),
        float(manifest.get("schedule_beta_start", cfg.schedule.beta_start)),
        float(manifest.get("schedule_beta_end", cfg.schedule.beta_end)),
        manifest.get("schedule_sigma_mode", cfg.schedule.sigma_mode),
    )
    tr_cfg = TranslateConfig(
        patch=cfg.patch.p,
        cell=cfg.patch.r,
        w_initial=cfg.temporal.w_T,
        omega=cfg.temporal.omega,
        collision=cfg.temporal.collision,
        blend_mode=cfg.patch.blend_mode,
        ransac=RansacConfig(
            max_iters=cfg.temporal.ransac_iters,
            threshold=cfg.temporal.ransac_threshold,
            confidence=cfg.temporal.ransac_confidence,
            min_motion=cfg.temporal.min_motion,
        ),
        seed=cfg.translate.seed,
        use_ema=cfg.translate.use_ema,
    )
    denoiser = as_batch_denoiser(params, use_ema=cfg.translate.use_ema)
    frames = translate_video(
        to_model_range(dataset.ir), dataset.logits, dataset.flows,
        denoiser, schedule, tr_cfg,
    )
    gen_dir = os.path.join(out_dir, "gen")
    os.makedirs(gen_dir, exist_ok=True)
    for i in range(frames.shape[0]):
        write_png(os.path.join(gen_dir, f"{i:05}.png"), from_model_range(frames[i]))
    write_resolved(cfg, out_dir)
    with open(os.path.join(out_dir, "provenance.txt"), "w") as fh:
        fh.write(f"seed={tr_cfg.seed}\n")
        fh.write(f"config_sha256={cfg.digest()}\n")
        fh.write(f"checkpoint={cfg.paths.checkpoint}\n")
        fh.write(f"checkpoint_step={manifest.get('opt_step')}\n")
        fh.write(f"frames={frames.shape[0]}\n")
    print(f"translated {frames.shape[0]} frames into {gen_dir}")


def cmd_eval(cfg, out_dir: str, generated=None, reference=None, flows_dir=None) -> None:
    import numpy as np

    from .config import write_resolved
    from .data_io import load_frames_dir, read_tensor, u8_to_unit
    from .figures import save_metric_report
    from .metrics import evaluate_frames

    generated = generated or os.path.join(cfg.paths.output, "gen")
    reference = reference or os.path.join(cfg.paths.dataset, "vis")
    if flows_dir is None:
        candidate = os.path.join(cfg.paths.dataset, "flow")
        flows_dir = candidate if os.path.isdir(candidate) else None

    gen = u8_to_unit(load_frames_dir(generated))
    ref = u8_to_unit(load_frames_dir(reference))
    flows = None
    if flows_dir:
        names = sorted(n for n in os.listdir(flows_dir) if n.endswith(".tct"))
        if names:
            flows = np.stack([read_tensor(os.path.join(flows_dir, n)) for n in names])
    report = evaluate_frames(gen, ref, flows)

    os.makedirs(out_dir, exist_ok=True)
    report.write_csv(os.path.join(out_dir, "metrics.csv"))
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(report.summary_text())
    save_metric_report(report, os.path.join(out_dir, "metrics.png"))
    write_resolved(cfg, out_dir)
    print(report.summary_text(), end="")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageExit as exc:
        return int(exc.code)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 1
        _pin_threads(args.threads)

    from .config import load_run_config
    from .errors import ConfigMismatch, InvalidConfig, TcpdmError

    try:
        cfg = load_run_config(args.config, args.set)
        if args.seed is not None:
            if args.command == "synth":
                cfg.synth.seed = args.seed
            elif args.command == "train":
                cfg.train.seed = args.seed
            elif args.command == "translate":
                cfg.translate.seed = args.seed
        default_out = {
            "synth": cfg.paths.dataset,
            "train": cfg.paths.output,
            "translate": cfg.paths.output,
            "eval": cfg.paths.output,
        }[args.command]
        out_dir = args.out or default_out
        if args.command == "translate" and args.out:
            cfg.paths.output = args.out
        if args.command == "synth" and args.out:
            cfg.paths.dataset = args.out
    except (InvalidConfig, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        if args.command == "synth":
            cmd_synth(cfg, out_dir)
        elif args.command == "train":
            cmd_train(cfg, out_dir)
        elif args.command == "translate":
            cmd_translate(cfg, out_dir)
        elif args.command == "eval":
            cmd_eval(cfg, out_dir, args.generated, args.reference, args.flows)
    except ConfigMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TcpdmError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

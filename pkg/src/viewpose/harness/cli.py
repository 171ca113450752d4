"""Command-line interface.

Subcommands: gen-data, train-image-tokenizer, train-camera-tokenizer,
train-gst, sample, eval, inspect-checkpoint. Every command accepts
--config (JSON run config) and --seed. Exit codes: 0 success, 1 usage
error, 2 runtime failure. Machine-readable metrics go to --metrics-out as
line-delimited JSON.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .. import geometry, scenes, sequence, tokenizers
from ..errors import ViewposeError
from ..transformer import GstModel, ModelConfig
from . import checkpoint as ckpt
from . import evaluate as ev
from .config import (
    RunConfig,
    TrainMode,
    config_to_dict,
    load_config,
)
from .metrics import MetricsLog
from .train import (
    GstPipeline,
    camera_training_tensor,
    image_training_tensor,
    make_optimizer,
    train_gst,
)


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on usage errors (argparse default is 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None, help="JSON run config")
    p.add_argument("--seed", type=int, default=None, help="override the command seed")
    p.add_argument("--metrics-out", type=Path, default=None,
                   help="line-delimited JSON metrics file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="viewpose")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="generate a synthetic dataset")
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)

    for name in ("train-image-tokenizer", "train-camera-tokenizer"):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} on a dataset")
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--steps", type=int, default=None)
        _add_common(p)

    p = sub.add_parser("train-gst", help="train the joint next-token model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--image-tokenizer", type=Path, required=True)
    p.add_argument("--camera-tokenizer", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=[m.value for m in TrainMode], default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", type=Path, default=None)
    p.add_argument("--save-every", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("sample", help="draw from the trained joint model")
    p.add_argument("--mode", required=True,
                   choices=["nvs", "pose", "camera-prior", "image-prior"])
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--gst", type=Path, required=True)
    p.add_argument("--image-tokenizer", type=Path, required=True)
    p.add_argument("--camera-tokenizer", type=Path, required=True)
    p.add_argument("--observation", type=Path, required=True)
    p.add_argument("--camera", type=Path, default=None,
                   help="pose file: first view = observation, second = target")
    p.add_argument("--target", type=Path, default=None,
                   help="target image (pose mode)")
    p.add_argument("--n", type=int, default=8, help="draws for prior modes")
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)

    p = sub.add_parser("eval", help="run the evaluation suites")
    p.add_argument("--suite", choices=["pose", "nvs", "all"], required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--gst", type=Path, required=True)
    p.add_argument("--image-tokenizer", type=Path, required=True)
    p.add_argument("--camera-tokenizer", type=Path, required=True)
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--split", default="test")
    _add_common(p)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint manifest")
    p.add_argument("checkpoint", type=Path)
    _add_common(p)

    return parser


# ---------------------------------------------------------------------------
# checkpoint <-> module helpers


def save_tokenizer(path, model: tokenizers.VQTokenizer, step: int, extra=None):
    snapshot = {
        "kind": f"{model.config.modality}_tokenizer",
        "tokenizer": dataclasses.asdict(model.config),
    }
    ckpt.save_checkpoint(path, step, snapshot, model, extra=extra)


def load_tokenizer(path) -> tokenizers.VQTokenizer:
    header, _ = ckpt.read_checkpoint(path)
    cfg_dict = dict(header["config"]["tokenizer"])
    cfg_dict["resolution"] = tuple(cfg_dict["resolution"])
    model = tokenizers.VQTokenizer(tokenizers.TokenizerConfig(**cfg_dict), seed=0)
    ckpt.load_into(path, model)
    model.eval()
    return model


def save_gst(path, model: GstModel, optimizer, step: int, run_cfg: RunConfig):
    snapshot = {
        "kind": "gst",
        "model": dataclasses.asdict(model.config),
        "run": config_to_dict(run_cfg),
    }
    ckpt.save_checkpoint(
        path, step, snapshot, model, optimizer=optimizer, codebook_names=()
    )


def load_gst(path) -> tuple[GstModel, dict]:
    header, _ = ckpt.read_checkpoint(path)
    model = GstModel(ModelConfig(**header["config"]["model"]), seed=0)
    ckpt.load_into(path, model)
    model.eval()
    return model, header


def _model_config_for(run_cfg: RunConfig) -> ModelConfig:
    img_cfg = run_cfg.image_tokenizer_model_config()
    cam_cfg = run_cfg.camera_tokenizer_model_config()
    grid_h, grid_w = img_cfg.grid_hw
    vocab = sequence.Vocabulary(img_cfg.codebook_size, cam_cfg.codebook_size)
    needed = 5 * grid_h * grid_w + 3  # packed layout is the longest
    base = run_cfg.model
    return ModelConfig(
        num_layers=base.num_layers, model_dim=base.model_dim,
        num_heads=base.num_heads, vocab_size=vocab.total,
        max_seq_len=max(base.max_seq_len, needed),
        rope_base=base.rope_base, dropout=base.dropout,
    )


def _pipeline_from_args(args) -> tuple[GstPipeline, dict]:
    dataset = scenes.load_dataset(args.data)
    model, header = load_gst(args.gst)
    image_tok = load_tokenizer(args.image_tokenizer)
    camera_tok = load_tokenizer(args.camera_tokenizer)
    return GstPipeline(model, image_tok, camera_tok, dataset), header


# ---------------------------------------------------------------------------
# commands


def _cmd_gen_data(args, cfg: RunConfig) -> int:
    data = cfg.data
    scenes.gen_dataset(
        num_scenes=args.scenes or data.scenes,
        views_per_scene=args.views or data.views,
        sampler=scenes.CameraSampler(
            radius_range=data.radius_range,
            elevation_range_deg=data.elevation_range_deg,
            lookat_jitter=data.lookat_jitter,
        ),
        intrinsics=geometry.default_intrinsics(
            args.resolution or data.resolution, args.resolution or data.resolution
        ),
        seed=args.seed if args.seed is not None else data.seed,
        out_dir=args.out,
    )
    print(f"dataset written to {args.out}")
    return 0


def _cmd_train_tokenizer(args, cfg: RunConfig, modality: str) -> int:
    dataset = scenes.load_dataset(args.data)
    res = dataset.intrinsics.height
    if modality == "image":
        tcfg = cfg.image_tokenizer
        model_cfg = tokenizers.image_tokenizer_config(
            (res, res), base_channels=tcfg.base_channels,
            num_downsamples=tcfg.num_downsamples,
            codebook_size=tcfg.codebook_size, codebook_dim=tcfg.codebook_dim,
        )
        data = image_training_tensor(dataset)
    else:
        tcfg = cfg.camera_tokenizer
        model_cfg = tokenizers.camera_tokenizer_config(
            (res, res), base_channels=tcfg.base_channels,
            num_downsamples=tcfg.num_downsamples,
            codebook_size=tcfg.codebook_size, codebook_dim=tcfg.codebook_dim,
            moment_scale=dataset.norm.distance_threshold,
        )
        n = min(4096, cfg.data.scenes * cfg.data.views)
        data = camera_training_tensor(dataset, n, tcfg.seed)
    seed = args.seed if args.seed is not None else tcfg.seed
    steps = args.steps or tcfg.steps
    model = tokenizers.VQTokenizer(model_cfg, seed=seed)
    log = tokenizers.train_tokenizer(
        model, data, steps=steps, batch_size=tcfg.batch_size, seed=seed,
        lr=tcfg.lr, commitment_weight=tcfg.commitment_weight,
        data_init=tcfg.data_init,
    )
    save_tokenizer(args.out, model, step=steps, extra={"train_log": log[-3:]})
    if args.metrics_out:
        with open(args.metrics_out, "w") as f:
            for rec in log:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    final = log[-1] if log else {}
    print(
        f"{modality} tokenizer trained for {steps} steps; "
        f"final window loss {final.get('window_loss', float('nan')):.5f}, "
        f"usage {final.get('codebook_usage', float('nan')):.3f}"
    )
    return 0


def _cmd_train_gst(args, cfg: RunConfig) -> int:
    dataset = scenes.load_dataset(args.data)
    image_tok = load_tokenizer(args.image_tokenizer)
    camera_tok = load_tokenizer(args.camera_tokenizer)
    train_cfg = cfg.train
    if args.mode:
        train_cfg = dataclasses.replace(train_cfg, mode=TrainMode(args.mode))
    if args.steps:
        train_cfg = dataclasses.replace(train_cfg, steps=args.steps)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    cfg = dataclasses.replace(cfg, train=train_cfg)

    model = GstModel(_model_config_for(cfg), seed=train_cfg.seed)
    pipeline = GstPipeline(model, image_tok, camera_tok, dataset)
    optimizer = make_optimizer(model, train_cfg)
    start_step = 0
    if args.resume:
        header = ckpt.load_into(args.resume, model, optimizer=optimizer)
        start_step = header["step"]
        print(f"resumed from {args.resume} at step {start_step}")

    metrics = MetricsLog(args.metrics_out, window=train_cfg.log_every)
    save_every = args.save_every or train_cfg.steps
    step = start_step
    while step < train_cfg.steps:
        stop = min(step + save_every, train_cfg.steps)
        train_gst(
            pipeline, train_cfg, metrics=metrics, optimizer=optimizer,
            start_step=step, stop_step=stop,
        )
        step = stop
        save_gst(args.out, model, optimizer, step, cfg)
    print(f"trained to step {step}; checkpoint at {args.out}")
    return 0


def _load_image(path: Path) -> np.ndarray:
    from PIL import Image

    return scenes.image_from_u8(np.asarray(Image.open(path).convert("RGB")))


def _save_image(path: Path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(scenes.quantize_image(img), "RGB").save(path)


def _cmd_sample(args, cfg: RunConfig) -> int:
    pipeline, _ = _pipeline_from_args(args)
    sampling = cfg.sampling
    seed = args.seed if args.seed is not None else 0
    observation = _load_image(args.observation)
    grid_hw = pipeline.grid_hw
    obs_tokens, _ = pipeline.image_tok.encode(observation.astype(np.float32))

    if args.mode == "nvs":
        if not args.camera:
            raise ViewposeError("nvs mode needs --camera (obs + target poses)")
        _, poses = geometry.load_poses(args.camera)
        if len(poses) < 2:
            raise ViewposeError("--camera pose file must hold two views")
        rel = geometry.relative_pose(poses[0], poses[1])
        rel = geometry.CameraPose(rel.rotation, rel.center * pipeline.norm.scale)
        cam_tokens, _ = pipeline.camera_tok.encode_raymap(
            geometry.pose_to_raymap(rel, pipeline.dataset.intrinsics)
        )
        layout = sequence.build_sequence(
            obs_tokens,
            tokenizers.TokenGrid(np.zeros(grid_hw, np.int64), "image"),
            cam_tokens, sequence.Ordering.CAM_THEN_IMG, pipeline.vocab,
        )
        prefix = layout.ids[: 2 * pipeline.grid_len + 2]
        local = ev.sample_image_segment(pipeline, prefix, layout.tags, sampling, seed)
        img = pipeline.image_tok.decode(
            tokenizers.TokenGrid(local.reshape(grid_hw), "image")
        )
        _save_image(args.out, img)
        print(f"novel view written to {args.out}")
    elif args.mode == "pose":
        if not args.target:
            raise ViewposeError("pose mode needs --target (second image)")
        target_tokens, _ = pipeline.image_tok.encode(
            _load_image(args.target).astype(np.float32)
        )
        layout = sequence.build_sequence(
            obs_tokens, target_tokens,
            tokenizers.TokenGrid(np.zeros(grid_hw, np.int64), "camera"),
            sequence.Ordering.IMG_THEN_CAM, pipeline.vocab,
        )
        prefix = layout.ids[: 2 * pipeline.grid_len + 2]
        local = ev.sample_camera_segment(pipeline, prefix, layout.tags, sampling, seed)
        pose = ev.recover_pose_from_tokens(pipeline, local)
        geometry.save_poses(args.out, pipeline.dataset.intrinsics, [pose])
        print("estimated relative pose (standardized center units):")
        print(f"  rotation rows: {pose.rotation.tolist()}")
        print(f"  center: {pose.center.tolist()}")
    else:
        mode = args.mode.replace("-", "_")
        result = ev.sample_prior(
            pipeline, observation, mode, n=args.n, seed=seed, sampling=sampling
        )
        if mode == "camera_prior":
            geometry.save_poses(
                args.out, pipeline.dataset.intrinsics, result["poses"]
            )
            print(
                f"{len(result['poses'])} prior poses written to {args.out} "
                f"({result['invalid']} invalid draws)"
            )
        else:
            args.out.mkdir(parents=True, exist_ok=True)
            for k, img in enumerate(result["images"]):
                _save_image(args.out / f"prior_{k:03d}.png", img)
            print(f"{len(result['images'])} prior images written to {args.out}")
    return 0


def _cmd_eval(args, cfg: RunConfig) -> int:
    pipeline, _ = _pipeline_from_args(args)
    eval_cfg = cfg.eval
    if args.pairs:
        eval_cfg = dataclasses.replace(eval_cfg, pairs=args.pairs)
    if args.seed is not None:
        eval_cfg = dataclasses.replace(eval_cfg, seed=args.seed)
    reports = []
    if args.suite in ("pose", "all"):
        reports.append(
            ev.evaluate_pose(pipeline, cfg.sampling, eval_cfg, split=args.split)
        )
    if args.suite in ("nvs", "all"):
        reports.append(
            ev.evaluate_nvs(pipeline, cfg.sampling, eval_cfg, split=args.split)
        )
    for report in reports:
        if report["suite"] == "pose":
            m, c, b = report["model"], report["tokenizer_ceiling"], report["chance_baseline"]
            print(f"pose suite ({report['split']}, {m['pairs']} pairs) [{report['note']}]")
            print(f"  model:             @15 {m['acc_at_15']:.3f}  @30 {m['acc_at_30']:.3f}  "
                  f"median center err {m['median_center_error']:.3f}")
            print(f"  tokenizer ceiling: @15 {c['acc_at_15']:.3f}  @30 {c['acc_at_30']:.3f}")
            print(f"  chance baseline:   @15 {b['acc_at_15']:.3f}  @30 {b['acc_at_30']:.3f}")
        else:
            m, c = report["model"], report["tokenizer_ceiling"]
            print(f"nvs suite ({report['split']}, {report['pairs']} pairs) [{report['note']}]")
            print(f"  model:             PSNR {m['psnr']:.2f} dB  SSIM {m['ssim']:.3f}")
            print(f"  tokenizer ceiling: PSNR {c['psnr']:.2f} dB  SSIM {c['ssim']:.3f}")
    if args.metrics_out:
        with open(args.metrics_out, "w") as f:
            for report in reports:
                f.write(json.dumps(report, sort_keys=True) + "\n")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        cfg = load_config(args.config)
        if args.command == "gen-data":
            return _cmd_gen_data(args, cfg)
        if args.command == "train-image-tokenizer":
            return _cmd_train_tokenizer(args, cfg, "image")
        if args.command == "train-camera-tokenizer":
            return _cmd_train_tokenizer(args, cfg, "camera")
        if args.command == "train-gst":
            return _cmd_train_gst(args, cfg)
        if args.command == "sample":
            return _cmd_sample(args, cfg)
        if args.command == "eval":
            return _cmd_eval(args, cfg)
        if args.command == "inspect-checkpoint":
            print(ckpt.describe(args.checkpoint))
            return 0
        parser.error(f"unknown command {args.command}")
    except (ViewposeError, OSError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Evaluation: relative pose estimation, novel view synthesis, and prior
sampling, plus the oracle decompositions (tokenizer ceilings, chance
baseline) that bound what the generative model can achieve.

Every eval report carries a metrics note: no perceptual metric is
computed, image quality is PSNR and SSIM only.
"""

from __future__ import annotations

import numpy as np
import torch

from .. import geometry, scenes, sequence, tokenizers, transformer
from ..errors import DegenerateDirection, SingularGeometry, ViewposeError
from .config import EvalConfig, SamplingConfig
from .metrics import psnr, ssim
from .train import GstPipeline, pick_view_pair, relative_scaled_pose

METRICS_NOTE = "no perceptual metric; image quality reported as PSNR/SSIM only"


def _dummy_grid(pipeline: GstPipeline, modality: str) -> tokenizers.TokenGrid:
    return tokenizers.TokenGrid(
        np.zeros(pipeline.grid_hw, dtype=np.int64), modality
    )


def _layout_for(pipeline, obs, image, camera, ordering):
    return sequence.build_sequence(obs, image, camera, ordering, pipeline.vocab)


def recover_pose_from_tokens(
    pipeline: GstPipeline, camera_indices: np.ndarray
) -> geometry.CameraPose:
    """Decode camera tokens to a ray map and solve for the pose."""
    tokens = tokenizers.TokenGrid(
        camera_indices.reshape(pipeline.grid_hw), "camera"
    )
    raymap = pipeline.camera_tok.decode_raymap(tokens)
    return geometry.raymap_to_pose(raymap, pipeline.dataset.intrinsics)


def sample_camera_segment(
    pipeline: GstPipeline,
    prefix_ids: np.ndarray,
    tags: sequence.PositionTags,
    sampling: SamplingConfig,
    seed: int,
) -> np.ndarray:
    lo, hi = pipeline.vocab.camera_range
    out = transformer.sample(
        pipeline.model, prefix_ids, tags.rows, tags.cols,
        steps=pipeline.grid_len, seed=seed,
        temperature=sampling.camera_temperature,
        top_k=sampling.camera_top_k,
        allowed_range=(lo, hi),
    )
    return out - lo


def sample_image_segment(
    pipeline: GstPipeline,
    prefix_ids: np.ndarray,
    tags: sequence.PositionTags,
    sampling: SamplingConfig,
    seed: int,
) -> np.ndarray:
    lo, hi = pipeline.vocab.image_range
    out = transformer.sample(
        pipeline.model, prefix_ids, tags.rows, tags.cols,
        steps=pipeline.grid_len, seed=seed,
        temperature=sampling.image_temperature,
        top_k=sampling.image_top_k,
        allowed_range=(lo, hi),
    )
    return out - lo


def _pose_metrics(rot_errors, center_errors, failures: int) -> dict:
    rot = np.asarray(rot_errors, dtype=np.float64)
    total = len(rot) + failures
    return {
        "pairs": total,
        "failures": failures,
        "acc_at_15": float(np.sum(rot <= 15.0)) / total,
        "acc_at_30": float(np.sum(rot <= 30.0)) / total,
        "median_rotation_error_deg": float(np.median(rot)) if len(rot) else float("nan"),
        "median_center_error": (
            float(np.median(center_errors)) if len(center_errors) else float("nan")
        ),
    }


def _eval_pairs(pipeline: GstPipeline, eval_cfg: EvalConfig, split: str):
    """Deterministic (scene, obs view, target view) pair list."""
    pairs = []
    for k in range(eval_cfg.pairs):
        rng = np.random.default_rng([eval_cfg.seed, 0xE7A1, k])
        scene_id, a, b, rel = pipeline.draw_sample(rng, split)
        pairs.append((scene_id, a, b, rel))
    return pairs


def tokenizer_ceiling_pose(pipeline: GstPipeline, eval_cfg: EvalConfig,
                           split: str = "test") -> dict:
    """Round-trip the ground-truth camera through the tokenizer alone."""
    rot_errors, center_errors, failures = [], [], 0
    for scene_id, a, b, rel in _eval_pairs(pipeline, eval_cfg, split):
        tokens, _ = pipeline.camera_tok.encode_raymap(
            geometry.pose_to_raymap(rel, pipeline.dataset.intrinsics)
        )
        try:
            rec = recover_pose_from_tokens(pipeline, tokens.indices)
        except (SingularGeometry, DegenerateDirection):
            failures += 1
            continue
        rot_errors.append(geometry.rotation_geodesic_error(rec.rotation, rel.rotation))
        center_errors.append(float(np.linalg.norm(rec.center - rel.center)))
    return _pose_metrics(rot_errors, center_errors, failures)


def chance_pose_baseline(pipeline: GstPipeline, eval_cfg: EvalConfig) -> dict:
    """Monte-Carlo accuracy of guessing an independent relative pose.

    Guess and truth are independent draws from the camera prior's
    filtered relative-pose distribution; no image information is used.
    """
    dataset = pipeline.dataset
    sampler = dataset.sampler()
    norm = pipeline.norm
    spec = dataset.scene_spec(dataset.scene_ids("test")[0])

    def draw_rel(rng):
        for _ in range(50):
            p1 = scenes.sample_camera(spec, sampler, rng.integers(2**63))
            p2 = scenes.sample_camera(spec, sampler, rng.integers(2**63))
            rel = relative_scaled_pose(p1, p2, norm.scale)
            if np.linalg.norm(rel.center) <= norm.distance_threshold:
                return rel
        return rel

    rot_errors, center_errors = [], []
    rng = np.random.default_rng([eval_cfg.seed, 0xBA5E])
    for _ in range(eval_cfg.baseline_trials):
        truth = draw_rel(rng)
        guess = draw_rel(rng)
        rot_errors.append(
            geometry.rotation_geodesic_error(guess.rotation, truth.rotation)
        )
        center_errors.append(float(np.linalg.norm(guess.center - truth.center)))
    return _pose_metrics(rot_errors, center_errors, failures=0)


def evaluate_pose(
    pipeline: GstPipeline,
    sampling: SamplingConfig,
    eval_cfg: EvalConfig,
    split: str = "test",
    include_baseline: bool = True,
) -> dict:
    """Pose suite: model accuracy, tokenizer ceiling, and chance baseline."""
    rot_errors, center_errors, failures = [], [], 0
    for k, (scene_id, a, b, rel) in enumerate(
        _eval_pairs(pipeline, eval_cfg, split)
    ):
        obs = tokenizers.TokenGrid(pipeline.image_tokens(scene_id, a), "image")
        img = tokenizers.TokenGrid(pipeline.image_tokens(scene_id, b), "image")
        layout = _layout_for(
            pipeline, obs, img, _dummy_grid(pipeline, "camera"),
            sequence.Ordering.IMG_THEN_CAM,
        )
        prefix = layout.ids[: 2 * pipeline.grid_len + 2]
        local = sample_camera_segment(
            pipeline, prefix, layout.tags, sampling, seed=eval_cfg.seed * 100003 + k
        )
        try:
            rec = recover_pose_from_tokens(pipeline, local)
        except (SingularGeometry, DegenerateDirection):
            failures += 1
            continue
        rot_errors.append(geometry.rotation_geodesic_error(rec.rotation, rel.rotation))
        center_errors.append(float(np.linalg.norm(rec.center - rel.center)))

    report = {
        "suite": "pose",
        "split": split,
        "note": METRICS_NOTE,
        "model": _pose_metrics(rot_errors, center_errors, failures),
        "tokenizer_ceiling": tokenizer_ceiling_pose(pipeline, eval_cfg, split),
    }
    if include_baseline:
        report["chance_baseline"] = chance_pose_baseline(pipeline, eval_cfg)
    return report


def evaluate_nvs(
    pipeline: GstPipeline,
    sampling: SamplingConfig,
    eval_cfg: EvalConfig,
    split: str = "test",
) -> dict:
    """NVS suite: sample the view for the true camera; report PSNR/SSIM
    next to the tokenizer-reconstruction ceiling."""
    model_psnr, model_ssim, ceil_psnr, ceil_ssim = [], [], [], []
    for k, (scene_id, a, b, rel) in enumerate(
        _eval_pairs(pipeline, eval_cfg, split)
    ):
        obs = tokenizers.TokenGrid(pipeline.image_tokens(scene_id, a), "image")
        cam_tokens, _ = pipeline.camera_tok.encode_raymap(
            geometry.pose_to_raymap(rel, pipeline.dataset.intrinsics)
        )
        layout = _layout_for(
            pipeline, obs, _dummy_grid(pipeline, "image"), cam_tokens,
            sequence.Ordering.CAM_THEN_IMG,
        )
        prefix = layout.ids[: 2 * pipeline.grid_len + 2]
        local = sample_image_segment(
            pipeline, prefix, layout.tags, sampling, seed=eval_cfg.seed * 200003 + k
        )
        generated = pipeline.image_tok.decode(
            tokenizers.TokenGrid(local.reshape(pipeline.grid_hw), "image")
        )
        target = pipeline.dataset.load_image(scene_id, b).astype(np.float64)
        model_psnr.append(psnr(target, generated))
        model_ssim.append(ssim(target, generated))

        recon = pipeline.image_tok.decode(
            tokenizers.TokenGrid(pipeline.image_tokens(scene_id, b), "image")
        )
        ceil_psnr.append(psnr(target, recon))
        ceil_ssim.append(ssim(target, recon))

    return {
        "suite": "nvs",
        "split": split,
        "note": METRICS_NOTE,
        "model": {"psnr": float(np.mean(model_psnr)), "ssim": float(np.mean(model_ssim))},
        "tokenizer_ceiling": {
            "psnr": float(np.mean(ceil_psnr)), "ssim": float(np.mean(ceil_ssim))
        },
        "pairs": eval_cfg.pairs,
    }


def sample_prior(
    pipeline: GstPipeline,
    observation: np.ndarray,
    mode: str,
    n: int,
    seed: int,
    sampling: SamplingConfig | None = None,
) -> dict:
    """Draw n poses (camera_prior) or images (image_prior) given one image.

    observation: (H, W, 3) float image in [-1, 1]. Returns poses in the
    observation camera frame (standardized center units) or decoded
    images; invalid decodes are counted, not raised.
    """
    sampling = sampling or SamplingConfig()
    obs_tokens, _ = pipeline.image_tok.encode(observation.astype(np.float32))
    dummy_i = _dummy_grid(pipeline, "image")
    dummy_c = _dummy_grid(pipeline, "camera")
    if mode == "camera_prior":
        layout = _layout_for(
            pipeline, obs_tokens, dummy_i, dummy_c, sequence.Ordering.CAM_THEN_IMG
        )
    elif mode == "image_prior":
        layout = _layout_for(
            pipeline, obs_tokens, dummy_i, dummy_c, sequence.Ordering.IMG_THEN_CAM
        )
    else:
        raise ValueError(f"unknown prior mode {mode!r}")
    prefix = layout.ids[: pipeline.grid_len + 2]

    poses, images, invalid = [], [], 0
    for k in range(n):
        draw_seed = int(np.random.default_rng([seed, k]).integers(2**63))
        if mode == "camera_prior":
            local = sample_camera_segment(
                pipeline, prefix, layout.tags, sampling, draw_seed
            )
            try:
                poses.append(recover_pose_from_tokens(pipeline, local))
            except (SingularGeometry, DegenerateDirection):
                invalid += 1
        else:
            local = sample_image_segment(
                pipeline, prefix, layout.tags, sampling, draw_seed
            )
            img = pipeline.image_tok.decode(
                tokenizers.TokenGrid(local.reshape(pipeline.grid_hw), "image")
            )
            if np.isfinite(img).all():
                images.append(img)
            else:
                invalid += 1
    out = {"mode": mode, "invalid": invalid}
    if mode == "camera_prior":
        out["poses"] = poses
    else:
        out["images"] = images
    return out


def prior_elevations(
    pipeline: GstPipeline,
    rel_poses: list[geometry.CameraPose],
    obs_pose: geometry.CameraPose,
    centroid: np.ndarray,
) -> np.ndarray:
    """World-frame elevations (degrees) of sampled relative camera poses."""
    scale = pipeline.norm.scale
    out = []
    for rel in rel_poses:
        world_center = obs_pose.center * scale + obs_pose.rotation @ rel.center
        out.append(scenes.elevation_deg(world_center, centroid * scale))
    return np.array(out)

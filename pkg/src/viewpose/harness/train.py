"""Training loops: tokenizer data assembly, pair sampling, and the joint
next-token training loop over the unified vocabulary.

All sample draws are pure functions of (seed, step, slot), so runs are
deterministic, resumable mid-stream, and independent of how batches are
split into gradient-accumulation micro-batches.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .. import geometry, scenes, sequence, tokenizers
from ..errors import NonFiniteLoss
from ..transformer import GstModel
from .config import GstTrainConfig, TrainMode
from .metrics import MetricsLog

MAX_PAIR_TRIES = 50


def scaled_pose(pose: geometry.CameraPose, scale: float) -> geometry.CameraPose:
    return geometry.CameraPose(pose.rotation, pose.center * scale)


def relative_scaled_pose(
    obs: geometry.CameraPose, target: geometry.CameraPose, scale: float
) -> geometry.CameraPose:
    """Target pose in the observation frame with standardized center units."""
    rel = geometry.relative_pose(obs, target)
    return geometry.CameraPose(rel.rotation, rel.center * scale)


def pick_view_pair(
    rng: np.random.Generator,
    poses: list[geometry.CameraPose],
    norm: geometry.SceneNormalization,
) -> tuple[int, int]:
    """Draw an (observation, target) view pair passing the distance filter."""
    n = len(poses)
    for _ in range(MAX_PAIR_TRIES):
        a, b = rng.choice(n, size=2, replace=False)
        if geometry.filter_pair(
            scaled_pose(poses[a], norm.scale),
            scaled_pose(poses[b], norm.scale),
            norm,
        ):
            return int(a), int(b)
    return int(a), int(b)  # distance filter is loose; accept the last draw


class GstPipeline:
    """Frozen tokenizers plus the dataset, with cached image tokens."""

    def __init__(
        self,
        model: GstModel,
        image_tok: tokenizers.VQTokenizer,
        camera_tok: tokenizers.VQTokenizer,
        dataset: scenes.Dataset,
    ):
        if image_tok.config.grid_hw != camera_tok.config.grid_hw:
            raise ValueError(
                "image and camera tokenizers must produce equal token grids: "
                f"{image_tok.config.grid_hw} vs {camera_tok.config.grid_hw}"
            )
        self.model = model
        self.image_tok = image_tok
        self.camera_tok = camera_tok
        self.dataset = dataset
        self.vocab = sequence.Vocabulary(
            image_size=image_tok.config.codebook_size,
            camera_size=camera_tok.config.codebook_size,
        )
        if model.config.vocab_size != self.vocab.total:
            raise ValueError(
                f"model vocab {model.config.vocab_size} != tokenizer vocab {self.vocab.total}"
            )
        self.grid_hw = image_tok.config.grid_hw
        self.grid_len = self.grid_hw[0] * self.grid_hw[1]
        self._image_tokens: dict[str, np.ndarray] = {}
        self._poses: dict[str, list[geometry.CameraPose]] = {}

    @property
    def norm(self) -> geometry.SceneNormalization:
        return self.dataset.norm

    def poses(self, scene_id: str) -> list[geometry.CameraPose]:
        if scene_id not in self._poses:
            self._poses[scene_id] = self.dataset.load_poses(scene_id)
        return self._poses[scene_id]

    def image_tokens(self, scene_id: str, view: int) -> np.ndarray:
        """(h, w) token indices; all views of a scene are encoded at once."""
        if scene_id not in self._image_tokens:
            views = [
                self.dataset.load_image(scene_id, v)
                for v in range(self.dataset.views_per_scene)
            ]
            batch = torch.from_numpy(
                np.stack(views).transpose(0, 3, 1, 2).copy()
            )
            with torch.no_grad():
                indices, _ = self.image_tok.encode_batch(batch)
            self._image_tokens[scene_id] = indices.numpy()
        return self._image_tokens[scene_id][view]

    def camera_tokens_batch(self, rel_poses: list[geometry.CameraPose]) -> np.ndarray:
        """(B, h, w) camera token indices for scaled relative poses."""
        channels = [
            self.camera_tok.raymap_channels(
                geometry.pose_to_raymap(p, self.dataset.intrinsics)
            )
            for p in rel_poses
        ]
        batch = torch.from_numpy(np.stack(channels).transpose(0, 3, 1, 2).copy())
        with torch.no_grad():
            indices, _ = self.camera_tok.encode_batch(batch)
        return indices.numpy()

    def draw_sample(self, rng: np.random.Generator, split: str = "train"):
        """(scene_id, obs_view, target_view, scaled relative pose)."""
        ids = self.dataset.scene_ids(split)
        scene_id = ids[int(rng.integers(len(ids)))]
        poses = self.poses(scene_id)
        a, b = pick_view_pair(rng, poses, self.norm)
        rel = relative_scaled_pose(poses[a], poses[b], self.norm.scale)
        return scene_id, a, b, rel


def masked_cross_entropy(logits, targets, mask) -> torch.Tensor:
    """Mean next-token cross-entropy over the supervised positions."""
    flat = logits.reshape(-1, logits.shape[-1])
    losses = F.cross_entropy(flat, targets.reshape(-1), reduction="none")
    weights = mask.reshape(-1).to(losses.dtype)
    return (losses * weights).sum() / weights.sum()


def assemble_batch(
    pipeline: GstPipeline,
    cfg: GstTrainConfig,
    step: int,
    slots: range,
):
    """Build one (micro-)batch: token ids, supervision mask, tags, mask."""
    grids_o, grids_i, rels, orderings = [], [], [], []
    for slot in slots:
        rng = np.random.default_rng([cfg.seed, step, slot])
        scene_id, a, b, rel = pipeline.draw_sample(rng, "train")
        grids_o.append(pipeline.image_tokens(scene_id, a))
        grids_i.append(pipeline.image_tokens(scene_id, b))
        rels.append(rel)
        cam_first = rng.uniform() < cfg.branch_weight_cam_first(step)
        orderings.append(
            sequence.Ordering.CAM_THEN_IMG if cam_first else sequence.Ordering.IMG_THEN_CAM
        )
    cam_tokens = pipeline.camera_tokens_batch(rels)

    ids_rows, mask_rows = [], []
    tags = None
    for k in range(len(grids_o)):
        o = tokenizers.TokenGrid(grids_o[k], "image")
        i = tokenizers.TokenGrid(grids_i[k], "image")
        c = tokenizers.TokenGrid(cam_tokens[k], "camera")
        if cfg.mode is TrainMode.JOINT_PACKED:
            layout = sequence.build_packed_sequence(o, i, c, pipeline.vocab)
        else:
            layout = sequence.build_sequence(
                o, i, c, orderings[k], pipeline.vocab,
                target_only=(cfg.mode is TrainMode.ALTERNATING),
                include_task_in_loss=cfg.include_task_in_loss,
            )
        ids_rows.append(layout.ids)
        mask_rows.append(layout.loss_mask)
        tags = layout.tags
    attn = sequence.build_attention_mask(
        sequence.MaskMode.PACKED_JOINT
        if cfg.mode is TrainMode.JOINT_PACKED
        else sequence.MaskMode.ORDERED_CAUSAL,
        pipeline.grid_len,
    )
    return np.stack(ids_rows), np.stack(mask_rows), tags, attn


def make_optimizer(model: GstModel, cfg: GstTrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.ndim >= 2 else no_decay).append(p)
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.lr,
        betas=(0.9, 0.95),
    )


def train_gst(
    pipeline: GstPipeline,
    cfg: GstTrainConfig,
    metrics: MetricsLog | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    start_step: int = 0,
    stop_step: int | None = None,
    on_step=None,
) -> torch.optim.Optimizer:
    """Run the next-token training loop from start_step to stop_step.

    Tokenizers stay frozen; only the transformer trains. Loss is the
    masked cross-entropy over the positions the mode supervises. Raises
    NonFiniteLoss with diagnostics if the loss leaves the reals.
    """
    model = pipeline.model
    optimizer = optimizer or make_optimizer(model, cfg)
    metrics = metrics or MetricsLog(window=cfg.log_every)
    stop = cfg.steps if stop_step is None else stop_step
    micro = cfg.batch_size // cfg.grad_accumulation
    if micro * cfg.grad_accumulation != cfg.batch_size:
        raise ValueError("batch_size must be divisible by grad_accumulation")

    model.train()
    for step in range(start_step, stop):
        for group in optimizer.param_groups:
            group["lr"] = cfg.lr_at(step)
        optimizer.zero_grad()
        batch_loss = 0.0
        first_ids = None
        for acc in range(cfg.grad_accumulation):
            slots = range(acc * micro, (acc + 1) * micro)
            ids, loss_mask, tags, attn = assemble_batch(pipeline, cfg, step, slots)
            if first_ids is None:
                first_ids = ids[0]
            inputs = torch.from_numpy(ids[:, :-1])
            targets = torch.from_numpy(ids[:, 1:])
            tmask = torch.from_numpy(loss_mask[:, 1:])
            logits = model(
                inputs, tags.rows[:-1], tags.cols[:-1],
                mask=attn.matrix[:-1, :-1],
            )
            loss = masked_cross_entropy(logits, targets, tmask)
            (loss / cfg.grad_accumulation).backward()
            batch_loss += loss.item() / cfg.grad_accumulation
        grad_norm = torch.nn.utils.clip_grad_norm_(
            model.parameters(), cfg.grad_clip
        ).item()
        if not np.isfinite(batch_loss) or not np.isfinite(grad_norm):
            raise NonFiniteLoss(
                step,
                f"non-finite loss {batch_loss} (grad norm {grad_norm}) at step "
                f"{step}; first sequence {first_ids.tolist()}",
            )
        optimizer.step()
        metrics.push_step(step, batch_loss, grad_norm)
        if on_step is not None:
            on_step(step, batch_loss)
    model.eval()
    return optimizer


# ---------------------------------------------------------------------------
# Tokenizer training data


def image_training_tensor(dataset: scenes.Dataset, split: str = "train") -> torch.Tensor:
    """All images of a split as one (N, 3, H, W) float tensor."""
    images = []
    for sid in dataset.scene_ids(split):
        for v in range(dataset.views_per_scene):
            images.append(dataset.load_image(sid, v))
    return torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2).copy())


def camera_training_tensor(
    dataset: scenes.Dataset,
    n_samples: int,
    seed: int,
    moment_scale: float | None = None,
    split: str = "train",
) -> torch.Tensor:
    """Ray maps of scaled relative poses as one (N, 6, H, W) float tensor.

    Pairs are drawn from the same distribution the joint model trains on
    (pair filter applied), so codebook usage reflects the deployed token
    distribution.
    """
    norm = dataset.norm
    moment_scale = moment_scale or norm.distance_threshold
    ids = dataset.scene_ids(split)
    poses_cache = {sid: dataset.load_poses(sid) for sid in ids}
    stacks = []
    for k in range(n_samples):
        rng = np.random.default_rng([seed, 0xCA0, k])
        sid = ids[int(rng.integers(len(ids)))]
        poses = poses_cache[sid]
        a, b = pick_view_pair(rng, poses, norm)
        rel = relative_scaled_pose(poses[a], poses[b], norm.scale)
        ch = geometry.pose_to_raymap(rel, dataset.intrinsics).as_channels()
        ch = ch.astype(np.float32)
        ch[..., :3] /= moment_scale
        stacks.append(ch)
    return torch.from_numpy(np.stack(stacks).transpose(0, 3, 1, 2).copy())

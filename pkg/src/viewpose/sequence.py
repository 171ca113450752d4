"""Unified vocabulary, sample layouts, loss masks, and attention masks.

A sample concatenates [BOS | observation tokens | task token | first
modality | second modality]. The task token selects which chain-rule
factorization of the joint image/camera distribution the sample follows;
image and camera tokens live in disjoint vocabulary ranges and the two
task ids sit at the end of the codebook, followed by the BOS id.

Everything here is a pure function; all are trivially thread-safe.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GridMismatch, MalformedLayout, ModalityViolation
from .tokenizers import TokenGrid


class Ordering(enum.Enum):
    CAM_THEN_IMG = "cam_then_img"   # p(c|o) * p(i|c,o)
    IMG_THEN_CAM = "img_then_cam"   # p(i|o) * p(c|i,o)


class MaskMode(enum.Enum):
    ORDERED_CAUSAL = "ordered_causal"
    PACKED_JOINT = "packed_joint"
    ALTERNATING = "alternating"


@dataclass(frozen=True)
class Vocabulary:
    """Id ranges: image tokens, camera tokens, two task ids, then BOS."""

    image_size: int
    camera_size: int

    def __post_init__(self):
        if self.image_size < 1 or self.camera_size < 1:
            raise ValueError("both codebook sizes must be positive")

    @property
    def task_cam_first(self) -> int:
        return self.image_size + self.camera_size

    @property
    def task_pose_first(self) -> int:
        return self.image_size + self.camera_size + 1

    @property
    def bos(self) -> int:
        return self.image_size + self.camera_size + 2

    @property
    def total(self) -> int:
        return self.image_size + self.camera_size + 3

    @property
    def image_range(self) -> tuple[int, int]:
        return 0, self.image_size

    @property
    def camera_range(self) -> tuple[int, int]:
        return self.image_size, self.image_size + self.camera_size

    def modality_of(self, token_id: int) -> str:
        if 0 <= token_id < self.image_size:
            return "image"
        if self.image_size <= token_id < self.image_size + self.camera_size:
            return "camera"
        if token_id in (self.task_cam_first, self.task_pose_first):
            return "task"
        if token_id == self.bos:
            return "bos"
        raise ValueError(f"id {token_id} outside the vocabulary")

    def task_for(self, ordering: Ordering) -> int:
        return (
            self.task_cam_first
            if ordering is Ordering.CAM_THEN_IMG
            else self.task_pose_first
        )


@dataclass
class PositionTags:
    """Per-position 2D RoPE coordinates plus a segment id.

    Grid tokens carry their (row, col) inside the token grid; scalar tokens
    (BOS, task ids) use a reserved index >= max(h, w) for both coordinates
    so they never alias a grid position.
    """

    rows: np.ndarray
    cols: np.ndarray
    segments: np.ndarray


@dataclass
class SampleLayout:
    """One ordered training sample over a (h, w) token grid."""

    ids: np.ndarray        # (3L+2,) int64
    loss_mask: np.ndarray  # (3L+2,) bool
    ordering: Ordering
    grid_hw: tuple[int, int]
    tags: PositionTags

    @property
    def grid_len(self) -> int:
        return self.grid_hw[0] * self.grid_hw[1]


@dataclass
class PackedLayout:
    """Both orderings of one sample packed into a single sequence."""

    ids: np.ndarray        # (5L+3,) int64
    loss_mask: np.ndarray
    grid_hw: tuple[int, int]
    tags: PositionTags

    @property
    def grid_len(self) -> int:
        return self.grid_hw[0] * self.grid_hw[1]


@dataclass
class AttentionMask:
    """matrix[q][k] is True iff query position q may attend to key k."""

    matrix: np.ndarray
    mode: MaskMode


def _grid_coords(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.repeat(np.arange(h, dtype=np.int64), w)
    cols = np.tile(np.arange(w, dtype=np.int64), h)
    return rows, cols


def _build_tags(h: int, w: int, parts: list[str]) -> PositionTags:
    """parts: 'scalar' or 'grid' entries in sequence order."""
    scalar_base = max(h, w)
    rows_parts, cols_parts, seg_parts = [], [], []
    scalar_slot = 0
    grid_rows, grid_cols = _grid_coords(h, w)
    for seg_id, part in enumerate(parts):
        if part == "scalar":
            idx = np.array([scalar_base + scalar_slot], dtype=np.int64)
            scalar_slot += 1
            rows_parts.append(idx)
            cols_parts.append(idx)
            seg_parts.append(np.array([seg_id], dtype=np.int64))
        else:
            rows_parts.append(grid_rows)
            cols_parts.append(grid_cols)
            seg_parts.append(np.full(h * w, seg_id, dtype=np.int64))
    return PositionTags(
        rows=np.concatenate(rows_parts),
        cols=np.concatenate(cols_parts),
        segments=np.concatenate(seg_parts),
    )


def _check_grids(*grids: TokenGrid) -> tuple[int, int]:
    shapes = {g.indices.shape for g in grids}
    if len(shapes) != 1:
        raise GridMismatch(f"token grids disagree on shape: {sorted(shapes)}")
    return grids[0].indices.shape


def build_sequence(
    observation: TokenGrid,
    image: TokenGrid,
    camera: TokenGrid,
    ordering: Ordering,
    vocab: Vocabulary,
    target_only: bool = False,
    include_task_in_loss: bool = False,
) -> SampleLayout:
    """Assemble [BOS, t_o, task, A, B] with its loss mask.

    Grids are flattened row-major; camera tokens get the vocabulary offset.
    target_only restricts the loss to the second modality segment (the
    alternating baseline); by default both segments carry loss. The task
    token is excluded from the loss unless include_task_in_loss is set,
    since the task is user-chosen at inference.
    """
    h, w = _check_grids(observation, image, camera)
    length = h * w
    obs = observation.indices.reshape(-1).astype(np.int64)
    img = image.indices.reshape(-1).astype(np.int64)
    cam = camera.indices.reshape(-1).astype(np.int64) + vocab.image_size
    if ordering is Ordering.CAM_THEN_IMG:
        seg_a, seg_b = cam, img
    else:
        seg_a, seg_b = img, cam
    ids = np.concatenate([
        [vocab.bos], obs, [vocab.task_for(ordering)], seg_a, seg_b,
    ]).astype(np.int64)
    loss_mask = np.zeros(ids.shape, dtype=bool)
    loss_mask[length + 2:] = True
    if target_only:
        loss_mask[length + 2: 2 * length + 2] = False
    if include_task_in_loss:
        loss_mask[length + 1] = True
    tags = _build_tags(h, w, ["scalar", "grid", "scalar", "grid", "grid"])
    return SampleLayout(
        ids=ids, loss_mask=loss_mask, ordering=ordering, grid_hw=(h, w), tags=tags
    )


def build_packed_sequence(
    observation: TokenGrid,
    image: TokenGrid,
    camera: TokenGrid,
    vocab: Vocabulary,
) -> PackedLayout:
    """Both orderings in one sequence: [BOS, t_o, TASKc, t_c, t_i, TASKp, t_i, t_c].

    Used with the PACKED_JOINT attention mask, under which the second
    branch sees only BOS and the observation tokens.
    """
    h, w = _check_grids(observation, image, camera)
    obs = observation.indices.reshape(-1).astype(np.int64)
    img = image.indices.reshape(-1).astype(np.int64)
    cam = camera.indices.reshape(-1).astype(np.int64) + vocab.image_size
    ids = np.concatenate([
        [vocab.bos], obs,
        [vocab.task_cam_first], cam, img,
        [vocab.task_pose_first], img, cam,
    ]).astype(np.int64)
    length = h * w
    loss_mask = np.zeros(ids.shape, dtype=bool)
    loss_mask[length + 2: 3 * length + 2] = True
    loss_mask[3 * length + 3:] = True
    tags = _build_tags(
        h, w, ["scalar", "grid", "scalar", "grid", "grid", "scalar", "grid", "grid"]
    )
    return PackedLayout(ids=ids, loss_mask=loss_mask, grid_hw=(h, w), tags=tags)


def parse_sequence(
    ids: np.ndarray,
    vocab: Vocabulary,
    grid_hw: tuple[int, int],
) -> tuple[TokenGrid, Ordering, TokenGrid, TokenGrid]:
    """Inverse of build_sequence: recover observation, ordering, and segments.

    Raises MalformedLayout when the frame (length, BOS, task id) is wrong
    and ModalityViolation when a segment token falls outside its range.
    """
    h, w = grid_hw
    length = h * w
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != (3 * length + 2,):
        raise MalformedLayout(
            f"expected length {3 * length + 2}, got {ids.shape}"
        )
    if ids[0] != vocab.bos:
        raise MalformedLayout("sequence does not start with BOS")
    task = int(ids[length + 1])
    if task == vocab.task_cam_first:
        ordering = Ordering.CAM_THEN_IMG
        mods = ("camera", "image")
    elif task == vocab.task_pose_first:
        ordering = Ordering.IMG_THEN_CAM
        mods = ("image", "camera")
    else:
        raise MalformedLayout(f"id {task} at the task position is not a task id")

    def to_grid(segment: np.ndarray, modality: str) -> TokenGrid:
        lo, hi = (
            vocab.image_range if modality == "image" else vocab.camera_range
        )
        if np.any(segment < lo) or np.any(segment >= hi):
            bad = segment[(segment < lo) | (segment >= hi)][0]
            raise ModalityViolation(
                f"id {bad} inside a {modality} segment (range [{lo}, {hi}))"
            )
        return TokenGrid((segment - lo).reshape(h, w), modality)

    obs = to_grid(ids[1: length + 1], "image")
    seg_a = to_grid(ids[length + 2: 2 * length + 2], mods[0])
    seg_b = to_grid(ids[2 * length + 2:], mods[1])
    return obs, ordering, seg_a, seg_b


def build_attention_mask(mode: MaskMode, grid_len: int) -> AttentionMask:
    """Boolean attention masks for the three training schemes.

    ORDERED_CAUSAL: lower triangular over 3L+2 positions.
    PACKED_JOINT: over 5L+3 positions; the first branch is causal, the
    second branch attends to BOS, the observation, and causally within
    itself, never to the first branch.
    ALTERNATING: lower triangular over a 2L+2 single-task sequence.
    """
    if grid_len < 1:
        raise ValueError("grid_len must be >= 1")
    length = grid_len
    if mode is MaskMode.ORDERED_CAUSAL:
        n = 3 * length + 2
        matrix = np.tril(np.ones((n, n), dtype=bool))
    elif mode is MaskMode.ALTERNATING:
        n = 2 * length + 2
        matrix = np.tril(np.ones((n, n), dtype=bool))
    else:
        n = 5 * length + 3
        matrix = np.tril(np.ones((n, n), dtype=bool))
        second_start = 3 * length + 2
        # second branch must not see the first branch (task + both segments)
        matrix[second_start:, length + 1: second_start] = False
    return AttentionMask(matrix=matrix, mode=mode)


def loss_targets(layout: SampleLayout | PackedLayout):
    """Next-token supervision: (input ids, target ids, target mask)."""
    ids = layout.ids
    return ids[:-1], ids[1:], layout.loss_mask[1:]


# ---------------------------------------------------------------------------
# Golden-file format for masks: header line then run-length encoded
# row-major booleans, for regression tests.


def save_mask_rle(path: str | Path, mask: AttentionMask) -> None:
    flat = mask.matrix.reshape(-1).astype(np.int8)
    runs = []
    start = 0
    for i in range(1, len(flat) + 1):
        if i == len(flat) or flat[i] != flat[start]:
            runs.append(f"{int(flat[start])}:{i - start}")
            start = i
    n = mask.matrix.shape[0]
    if mask.mode is MaskMode.ORDERED_CAUSAL:
        grid_len = (n - 2) // 3
    elif mask.mode is MaskMode.ALTERNATING:
        grid_len = (n - 2) // 2
    else:
        grid_len = (n - 3) // 5
    text = f"mask v1 {mask.mode.value} {grid_len}\n" + " ".join(runs) + "\n"
    Path(path).write_text(text)


def load_mask_rle(path: str | Path) -> AttentionMask:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split()
    if header[:2] != ["mask", "v1"]:
        raise ValueError(f"{path}: not a mask file")
    mode = MaskMode(header[2])
    grid_len = int(header[3])
    values = []
    for run in lines[1].split():
        value, count = run.split(":")
        values.extend([bool(int(value))] * int(count))
    if mode is MaskMode.ORDERED_CAUSAL:
        n = 3 * grid_len + 2
    elif mode is MaskMode.ALTERNATING:
        n = 2 * grid_len + 2
    else:
        n = 5 * grid_len + 3
    matrix = np.array(values, dtype=bool).reshape(n, n)
    return AttentionMask(matrix=matrix, mode=mode)

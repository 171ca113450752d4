import math
from pathlib import Path

import numpy as np
import pytest
import torch

from viewpose import sequence as seq
from viewpose.errors import GridMismatch, MalformedLayout, ModalityViolation
from viewpose.tokenizers import TokenGrid

DATA = Path(__file__).parent / "data"


def grid(values, modality, shape):
    return TokenGrid(np.asarray(values).reshape(shape), modality)


@pytest.fixture
def vocab88():
    return seq.Vocabulary(image_size=8, camera_size=8)


class TestVocabulary:
    def test_layout(self, vocab88):
        assert vocab88.task_cam_first == 16
        assert vocab88.task_pose_first == 17
        assert vocab88.bos == 18
        assert vocab88.total == 19

    def test_ranges_partition(self, vocab88):
        seen = [vocab88.modality_of(i) for i in range(vocab88.total)]
        assert seen == ["image"] * 8 + ["camera"] * 8 + ["task", "task", "bos"]
        with pytest.raises(ValueError):
            vocab88.modality_of(19)

    def test_camera_offset(self, vocab88):
        # camera local index 3 -> global id 11 when K_i = 8
        g = grid([3, 3, 3, 3], "camera", (2, 2))
        layout = seq.build_sequence(
            grid([0] * 4, "image", (2, 2)), grid([0] * 4, "image", (2, 2)),
            g, seq.Ordering.CAM_THEN_IMG, vocab88,
        )
        assert layout.ids[6] == 11


class TestBuildSequence:
    def test_cam_then_img_example(self, vocab88):
        o = grid([1, 2], "image", (1, 2))
        c = grid([3, 4], "camera", (1, 2))
        i = grid([5, 6], "image", (1, 2))
        layout = seq.build_sequence(o, i, c, seq.Ordering.CAM_THEN_IMG, vocab88)
        np.testing.assert_array_equal(layout.ids, [18, 1, 2, 16, 11, 12, 5, 6])
        np.testing.assert_array_equal(
            layout.loss_mask,
            [False, False, False, False, True, True, True, True],
        )

    def test_img_then_cam_order(self, vocab88):
        o = grid([1, 2], "image", (1, 2))
        c = grid([3, 4], "camera", (1, 2))
        i = grid([5, 6], "image", (1, 2))
        layout = seq.build_sequence(o, i, c, seq.Ordering.IMG_THEN_CAM, vocab88)
        np.testing.assert_array_equal(layout.ids, [18, 1, 2, 17, 5, 6, 11, 12])

    def test_target_only_masks_first_segment(self, vocab88):
        o = grid([1, 2], "image", (1, 2))
        c = grid([3, 4], "camera", (1, 2))
        i = grid([5, 6], "image", (1, 2))
        layout = seq.build_sequence(
            o, i, c, seq.Ordering.CAM_THEN_IMG, vocab88, target_only=True
        )
        np.testing.assert_array_equal(
            layout.loss_mask,
            [False, False, False, False, False, False, True, True],
        )

    def test_include_task_flag(self, vocab88):
        o = grid([1, 2], "image", (1, 2))
        c = grid([3, 4], "camera", (1, 2))
        i = grid([5, 6], "image", (1, 2))
        layout = seq.build_sequence(
            o, i, c, seq.Ordering.CAM_THEN_IMG, vocab88, include_task_in_loss=True
        )
        assert layout.loss_mask[3]

    def test_grid_mismatch(self, vocab88):
        o = grid([1, 2], "image", (1, 2))
        c = grid([3, 4, 5, 6], "camera", (2, 2))
        with pytest.raises(GridMismatch):
            seq.build_sequence(o, o, c, seq.Ordering.CAM_THEN_IMG, vocab88)

    def test_tags_reserved_scalar_positions(self, vocab88):
        o = grid([1, 2, 3, 4], "image", (2, 2))
        c = grid([0, 1, 2, 3], "camera", (2, 2))
        layout = seq.build_sequence(o, o, c, seq.Ordering.CAM_THEN_IMG, vocab88)
        tags = layout.tags
        assert tags.rows[0] == tags.cols[0] == 2      # BOS
        assert tags.rows[5] == tags.cols[5] == 3      # task token
        np.testing.assert_array_equal(tags.rows[1:5], [0, 0, 1, 1])
        np.testing.assert_array_equal(tags.cols[1:5], [0, 1, 0, 1])
        # scalars never alias grid coordinates
        assert tags.rows[0] >= 2 and tags.rows[5] >= 2

    def test_supervision_covers_each_target_token_once(self, vocab88):
        rng = np.random.default_rng(0)
        for ordering in seq.Ordering:
            o = grid(rng.integers(0, 8, 4), "image", (2, 2))
            i = grid(rng.integers(0, 8, 4), "image", (2, 2))
            c = grid(rng.integers(0, 8, 4), "camera", (2, 2))
            layout = seq.build_sequence(o, i, c, ordering, vocab88)
            _, targets, mask = seq.loss_targets(layout)
            supervised = sorted(targets[mask].tolist())
            expected = sorted(
                i.indices.reshape(-1).tolist()
                + (c.indices.reshape(-1) + 8).tolist()
            )
            assert supervised == expected


class TestParseSequence:
    def test_round_trip_example(self, vocab88):
        ids = np.array([18, 1, 2, 16, 11, 12, 5, 6])
        obs, ordering, a, b = seq.parse_sequence(ids, vocab88, (1, 2))
        assert ordering is seq.Ordering.CAM_THEN_IMG
        np.testing.assert_array_equal(obs.indices, [[1, 2]])
        np.testing.assert_array_equal(a.indices, [[3, 4]])
        np.testing.assert_array_equal(b.indices, [[5, 6]])
        assert a.modality == "camera" and b.modality == "image"

    def test_modality_violation(self, vocab88):
        ids = np.array([18, 1, 2, 16, 5, 12, 5, 6])  # id 5 in camera segment
        with pytest.raises(ModalityViolation):
            seq.parse_sequence(ids, vocab88, (1, 2))

    def test_malformed(self, vocab88):
        with pytest.raises(MalformedLayout):
            seq.parse_sequence(np.array([18, 1, 2]), vocab88, (1, 2))
        with pytest.raises(MalformedLayout):
            seq.parse_sequence(np.array([0, 1, 2, 16, 11, 12, 5, 6]), vocab88, (1, 2))
        with pytest.raises(MalformedLayout):
            seq.parse_sequence(np.array([18, 1, 2, 7, 11, 12, 5, 6]), vocab88, (1, 2))

    def test_random_layout_round_trip(self):
        rng = np.random.default_rng(123)
        vocab = seq.Vocabulary(image_size=32, camera_size=16)
        for _ in range(10_000):
            h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            o = grid(rng.integers(0, 32, h * w), "image", (h, w))
            i = grid(rng.integers(0, 32, h * w), "image", (h, w))
            c = grid(rng.integers(0, 16, h * w), "camera", (h, w))
            ordering = rng.choice(list(seq.Ordering))
            layout = seq.build_sequence(o, i, c, ordering, vocab)
            obs, got_ordering, a, b = seq.parse_sequence(layout.ids, vocab, (h, w))
            assert got_ordering is ordering
            np.testing.assert_array_equal(obs.indices, o.indices)
            if ordering is seq.Ordering.CAM_THEN_IMG:
                np.testing.assert_array_equal(a.indices, c.indices)
                np.testing.assert_array_equal(b.indices, i.indices)
            else:
                np.testing.assert_array_equal(a.indices, i.indices)
                np.testing.assert_array_equal(b.indices, c.indices)


class TestAttentionMasks:
    def test_ordered_causal_is_lower_triangular(self):
        mask = seq.build_attention_mask(seq.MaskMode.ORDERED_CAUSAL, 1)
        assert mask.matrix.shape == (5, 5)
        assert mask.matrix.sum() == 15
        np.testing.assert_array_equal(mask.matrix, np.tril(np.ones((5, 5), bool)))

    def test_packed_golden_matrix(self):
        golden = seq.load_mask_rle(DATA / "packed_joint_L1.rle")
        built = seq.build_attention_mask(seq.MaskMode.PACKED_JOINT, 1)
        np.testing.assert_array_equal(built.matrix, golden.matrix)
        # row for the second-branch image position attends {0, 1, 5, 6} only
        np.testing.assert_array_equal(np.flatnonzero(built.matrix[6]), [0, 1, 5, 6])

    def test_every_mode_diagonal_and_causal(self):
        for mode, grid_len in [
            (seq.MaskMode.ORDERED_CAUSAL, 4),
            (seq.MaskMode.PACKED_JOINT, 4),
            (seq.MaskMode.ALTERNATING, 4),
        ]:
            m = seq.build_attention_mask(mode, grid_len).matrix
            assert m.diagonal().all()
            assert not np.triu(m, k=1).any()

    def test_ordered_equals_packed_restricted_to_first_branch(self):
        grid_len = 3
        packed = seq.build_attention_mask(seq.MaskMode.PACKED_JOINT, grid_len).matrix
        ordered = seq.build_attention_mask(seq.MaskMode.ORDERED_CAUSAL, grid_len).matrix
        n = 3 * grid_len + 2
        np.testing.assert_array_equal(packed[:n, :n], ordered)

    def test_alternating_shape(self):
        m = seq.build_attention_mask(seq.MaskMode.ALTERNATING, 4).matrix
        assert m.shape == (10, 10)

    def test_rle_round_trip(self, tmp_path):
        for mode, grid_len in [
            (seq.MaskMode.ORDERED_CAUSAL, 5),
            (seq.MaskMode.PACKED_JOINT, 3),
            (seq.MaskMode.ALTERNATING, 7),
        ]:
            mask = seq.build_attention_mask(mode, grid_len)
            path = tmp_path / f"{mode.value}.rle"
            seq.save_mask_rle(path, mask)
            loaded = seq.load_mask_rle(path)
            assert loaded.mode == mask.mode
            np.testing.assert_array_equal(loaded.matrix, mask.matrix)


class TestLossTargets:
    def test_shift_and_mask_counts(self, vocab88):
        o = grid([1, 2], "image", (1, 2))
        c = grid([3, 4], "camera", (1, 2))
        i = grid([5, 6], "image", (1, 2))
        layout = seq.build_sequence(o, i, c, seq.Ordering.CAM_THEN_IMG, vocab88)
        inputs, targets, mask = seq.loss_targets(layout)
        assert len(inputs) == len(targets) == len(mask) == 7
        np.testing.assert_array_equal(inputs, layout.ids[:-1])
        np.testing.assert_array_equal(targets, layout.ids[1:])
        assert mask.sum() == 4

    def test_all_masked_out_gives_zero_loss(self, vocab88):
        o = grid([1, 2], "image", (1, 2))
        c = grid([3, 4], "camera", (1, 2))
        i = grid([5, 6], "image", (1, 2))
        layout = seq.build_sequence(o, i, c, seq.Ordering.CAM_THEN_IMG, vocab88)
        layout.loss_mask[:] = False
        _, targets, mask = seq.loss_targets(layout)
        logits = torch.randn(len(targets), vocab88.total)
        losses = torch.nn.functional.cross_entropy(
            logits, torch.from_numpy(targets), reduction="none"
        )
        assert losses[torch.from_numpy(mask)].sum().item() == 0.0

    def test_uniform_logits_cross_entropy_is_log_vocab(self):
        # one masked-in position, uniform logits over an 18-id vocabulary
        logits = torch.zeros(1, 18)
        loss = torch.nn.functional.cross_entropy(logits, torch.tensor([7]))
        assert loss.item() == pytest.approx(math.log(18), abs=1e-6)
        assert math.log(18) == pytest.approx(2.8904, abs=1e-4)


class TestPackedLayout:
    def test_structure(self, vocab88):
        o = grid([1, 2], "image", (1, 2))
        c = grid([3, 4], "camera", (1, 2))
        i = grid([5, 6], "image", (1, 2))
        packed = seq.build_packed_sequence(o, i, c, vocab88)
        np.testing.assert_array_equal(
            packed.ids, [18, 1, 2, 16, 11, 12, 5, 6, 17, 5, 6, 11, 12]
        )
        np.testing.assert_array_equal(
            packed.loss_mask,
            [False, False, False, False, True, True, True, True,
             False, True, True, True, True],
        )
        assert packed.ids.shape[0] == 5 * 2 + 3

    def test_tags_three_scalar_slots(self, vocab88):
        o = grid([1, 2], "image", (1, 2))
        c = grid([3, 4], "camera", (1, 2))
        i = grid([5, 6], "image", (1, 2))
        packed = seq.build_packed_sequence(o, i, c, vocab88)
        scalar_rows = packed.tags.rows[[0, 3, 8]]
        np.testing.assert_array_equal(scalar_rows, [2, 3, 4])

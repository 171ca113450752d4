import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from viewpose import sequence as seq
from viewpose import transformer as tfm
from viewpose.errors import SequenceTooLong
from viewpose.tokenizers import TokenGrid

TINY = tfm.ModelConfig(
    num_layers=2, model_dim=16, num_heads=4, vocab_size=20, max_seq_len=32
)


def random_tags(rng, t, span=8):
    return (
        rng.integers(0, span, size=t).astype(np.int64),
        rng.integers(0, span, size=t).astype(np.int64),
    )


class TestRope2d:
    def test_identity_at_origin(self):
        x = torch.randn(3, 8, dtype=torch.float64)
        pos = torch.zeros(3, dtype=torch.long)
        out = tfm.rope2d(x, pos, pos)
        torch.testing.assert_close(out, x, rtol=0, atol=0)

    def test_single_frequency_arithmetic(self):
        q = torch.tensor([[1.0, 0.0, 1.0, 0.0]], dtype=torch.float64)
        out = tfm.rope2d(q, torch.tensor([1]), torch.tensor([0]), base=10000.0)
        expected = torch.tensor(
            [[math.cos(1.0), math.sin(1.0), 1.0, 0.0]], dtype=torch.float64
        )
        torch.testing.assert_close(out, expected, rtol=0, atol=1e-15)

    def test_norm_preserving(self):
        rng = np.random.default_rng(0)
        x = torch.from_numpy(rng.normal(size=(64, 16)))
        rows = torch.from_numpy(rng.integers(0, 50, 64))
        cols = torch.from_numpy(rng.integers(0, 50, 64))
        out = tfm.rope2d(x, rows, cols)
        torch.testing.assert_close(
            out.norm(dim=-1), x.norm(dim=-1), rtol=0, atol=1e-9
        )

    def test_dot_product_depends_only_on_offsets(self):
        rng = np.random.default_rng(1)
        q = torch.from_numpy(rng.normal(size=8))
        k = torch.from_numpy(rng.normal(size=8))

        def dot(r1, c1, r2, c2):
            a = tfm.rope2d(q[None], torch.tensor([r1]), torch.tensor([c1]))[0]
            b = tfm.rope2d(k[None], torch.tensor([r2]), torch.tensor([c2]))[0]
            return (a @ b).item()

        for _ in range(50):
            r1, c1, r2, c2 = rng.integers(0, 40, 4).tolist()
            s, u = rng.integers(0, 40, 2).tolist()
            assert dot(r1, c1, r2, c2) == pytest.approx(
                dot(r1 + s, c1 + u, r2 + s, c2 + u), abs=1e-9
            )

    def test_row_and_col_halves_are_independent(self):
        x = torch.randn(1, 8, dtype=torch.float64)
        a = tfm.rope2d(x, torch.tensor([3]), torch.tensor([0]))
        b = tfm.rope2d(x, torch.tensor([3]), torch.tensor([5]))
        torch.testing.assert_close(a[..., :4], b[..., :4], rtol=0, atol=0)
        assert not torch.allclose(a[..., 4:], b[..., 4:])


class TestQkNorm:
    def test_unit_rms_fixed_point(self):
        q = torch.tensor([[1.0, -1.0, 1.0, -1.0]])  # RMS exactly 1
        k = torch.tensor([[2.0, 0.0, 0.0, 0.0]])    # RMS 1
        qn, kn = tfm.qk_norm(q, k)
        torch.testing.assert_close(qn, q, rtol=0, atol=1e-5)
        torch.testing.assert_close(kn, k, rtol=0, atol=1e-5)

    def test_scale_invariance(self):
        rng = torch.Generator().manual_seed(0)
        q = torch.randn(5, 8, generator=rng)
        k = torch.randn(5, 8, generator=rng)
        a = tfm.qk_norm(q, k)
        b = tfm.qk_norm(q * 100.0, k * 100.0)
        torch.testing.assert_close(a[0], b[0], rtol=1e-5, atol=1e-6)
        torch.testing.assert_close(a[1], b[1], rtol=1e-5, atol=1e-6)

    def test_logit_bound(self):
        rng = torch.Generator().manual_seed(1)
        head_dim = 16
        sq, sk = 1.7, 0.4
        q = torch.randn(256, head_dim, generator=rng) * 5
        k = torch.randn(256, head_dim, generator=rng) * 0.1
        qn, kn = tfm.qk_norm(
            q, k, torch.tensor(sq), torch.tensor(sk)
        )
        logits = qn @ kn.t()
        assert logits.abs().max().item() <= sq * sk * head_dim + 1e-4


class TestForward:
    def test_finite_logits_untrained(self):
        model = tfm.GstModel(TINY, seed=0)
        rng = np.random.default_rng(0)
        ids = rng.integers(0, TINY.vocab_size, size=(2, 10))
        rows, cols = random_tags(rng, 10)
        logits = model(ids, rows, cols)
        assert logits.shape == (2, 10, TINY.vocab_size)
        assert torch.isfinite(logits).all()

    def test_causality(self):
        # changing a late token leaves logits at earlier positions unchanged
        model = tfm.GstModel(TINY, seed=1)
        rng = np.random.default_rng(2)
        ids = rng.integers(0, TINY.vocab_size, size=12)
        rows, cols = random_tags(rng, 12)
        base = model(ids, rows, cols)
        mutated = ids.copy()
        mutated[9] = (mutated[9] + 1) % TINY.vocab_size
        out = model(mutated, rows, cols)
        torch.testing.assert_close(out[0, :9], base[0, :9], rtol=0, atol=1e-6)
        assert not torch.allclose(out[0, 9:], base[0, 9:], atol=1e-6)

    def test_sequence_too_long(self):
        model = tfm.GstModel(TINY, seed=0)
        rng = np.random.default_rng(3)
        t = TINY.max_seq_len + 1
        ids = rng.integers(0, TINY.vocab_size, size=t)
        rows, cols = random_tags(rng, t)
        with pytest.raises(SequenceTooLong):
            model(ids, rows, cols)

    def test_init_loss_near_log_vocab(self):
        cfg = tfm.ModelConfig(
            num_layers=4, model_dim=64, num_heads=4, vocab_size=67, max_seq_len=64
        )
        model = tfm.GstModel(cfg, seed=5)
        rng = np.random.default_rng(5)
        ids = rng.integers(0, cfg.vocab_size, size=(8, 32))
        rows, cols = random_tags(rng, 32)
        logits = model(ids, rows, cols)
        targets = torch.from_numpy(rng.integers(0, cfg.vocab_size, size=(8, 32)))
        loss = F.cross_entropy(
            logits.reshape(-1, cfg.vocab_size), targets.reshape(-1)
        )
        assert loss.item() == pytest.approx(math.log(cfg.vocab_size), rel=0.05)

    def test_full_finite_difference_gradient_check(self):
        # Oracle: central differences (step 1e-4) over every parameter of
        # the 2-layer dim-16 config, double precision.
        model = tfm.GstModel(TINY, seed=7).double()
        rng = np.random.default_rng(7)
        t = 6
        ids = rng.integers(0, TINY.vocab_size, size=(1, t))
        rows, cols = random_tags(rng, t)
        targets = torch.from_numpy(rng.integers(0, TINY.vocab_size, size=(1, t)))

        def loss_fn():
            logits = model(ids, rows, cols)
            return F.cross_entropy(
                logits.reshape(-1, TINY.vocab_size), targets.reshape(-1)
            )

        loss = loss_fn()
        grads = torch.autograd.grad(loss, list(model.parameters()))
        eps = 1e-4
        checked = 0
        for p, g in zip(model.parameters(), grads):
            flat = p.data.view(-1)
            gflat = g.view(-1)
            for slot in range(flat.numel()):
                orig = flat[slot].item()
                flat[slot] = orig + eps
                up = loss_fn().item()
                flat[slot] = orig - eps
                down = loss_fn().item()
                flat[slot] = orig
                fd = (up - down) / (2 * eps)
                an = gflat[slot].item()
                assert abs(an - fd) <= 1e-2 * max(abs(an), abs(fd)) + 1e-8, (
                    f"param slot {slot}: analytic {an} vs fd {fd}"
                )
                checked += 1
        assert checked == sum(p.numel() for p in model.parameters())


class TestKVCache:
    def test_incremental_matches_full(self):
        model = tfm.GstModel(TINY, seed=11)
        rng = np.random.default_rng(11)
        for _ in range(100):
            t = int(rng.integers(2, 16))
            ids = rng.integers(0, TINY.vocab_size, size=t)
            rows, cols = random_tags(rng, t)
            full = model(ids, rows, cols)[0]
            cache = tfm.KVCache(model.config)
            pieces = []
            cut = int(rng.integers(1, t))
            with torch.no_grad():
                pieces.append(model(ids[:cut], rows[:cut], cols[:cut], cache=cache)[0])
                for j in range(cut, t):
                    pieces.append(
                        model(ids[j:j + 1], rows[j:j + 1], cols[j:j + 1], cache=cache)[0]
                    )
            inc = torch.cat(pieces, dim=0)
            denom = full.abs().max().item()
            assert ((inc - full).abs().max().item() / denom) < 1e-5


class TestSample:
    def test_temperature_zero_deterministic(self):
        model = tfm.GstModel(TINY, seed=13)
        rng = np.random.default_rng(13)
        prefix = rng.integers(0, TINY.vocab_size, size=4)
        rows, cols = random_tags(rng, 12)
        a = tfm.sample(model, prefix, rows, cols, steps=8, seed=0, temperature=0.0)
        b = tfm.sample(model, prefix, rows, cols, steps=8, seed=99, temperature=0.0)
        np.testing.assert_array_equal(a, b)

    def test_same_seed_reproduces(self):
        model = tfm.GstModel(TINY, seed=13)
        rng = np.random.default_rng(14)
        prefix = rng.integers(0, TINY.vocab_size, size=4)
        rows, cols = random_tags(rng, 12)
        a = tfm.sample(model, prefix, rows, cols, steps=8, seed=3, temperature=1.0)
        b = tfm.sample(model, prefix, rows, cols, steps=8, seed=3, temperature=1.0)
        np.testing.assert_array_equal(a, b)

    def test_constrained_range(self):
        model = tfm.GstModel(TINY, seed=13)
        rng = np.random.default_rng(15)
        prefix = rng.integers(0, TINY.vocab_size, size=2)
        rows, cols = random_tags(rng, 20)
        out = tfm.sample(
            model, prefix, rows, cols, steps=16, seed=1,
            temperature=1.3, allowed_range=(5, 9),
        )
        assert ((out >= 5) & (out < 9)).all()

    def test_cache_equals_no_cache_sampling(self):
        model = tfm.GstModel(TINY, seed=17)
        rng = np.random.default_rng(17)
        for trial in range(100):
            t = int(rng.integers(1, 6))
            prefix = rng.integers(0, TINY.vocab_size, size=t)
            rows, cols = random_tags(rng, t + 6)
            with_cache = tfm.sample(
                model, prefix, rows, cols, steps=6, seed=trial, temperature=0.9,
                top_k=10, use_cache=True,
            )
            without = tfm.sample(
                model, prefix, rows, cols, steps=6, seed=trial, temperature=0.9,
                top_k=10, use_cache=False,
            )
            np.testing.assert_array_equal(with_cache, without)


class TestPackedMaskSemantics:
    def test_second_branch_invariant_to_first_branch_tokens(self):
        vocab = seq.Vocabulary(image_size=8, camera_size=8)
        cfg = tfm.ModelConfig(
            num_layers=2, model_dim=32, num_heads=4,
            vocab_size=vocab.total, max_seq_len=64,
        )
        model = tfm.GstModel(cfg, seed=19)
        rng = np.random.default_rng(19)
        h = w = 2
        grid_len = h * w
        o = TokenGrid(rng.integers(0, 8, (h, w)), "image")
        i = TokenGrid(rng.integers(0, 8, (h, w)), "image")
        c = TokenGrid(rng.integers(0, 8, (h, w)), "camera")
        packed = seq.build_packed_sequence(o, i, c, vocab)
        mask = seq.build_attention_mask(seq.MaskMode.PACKED_JOINT, grid_len)
        base = model(packed.ids, packed.tags.rows, packed.tags.cols, mask=mask)

        # permute the first-branch modality token values
        mutated = packed.ids.copy()
        first = slice(grid_len + 2, 3 * grid_len + 2)
        mutated[first] = np.concatenate([
            rng.permutation(rng.integers(8, 16, grid_len)),
            rng.permutation(rng.integers(0, 8, grid_len)),
        ])
        assert not np.array_equal(mutated, packed.ids)
        out = model(mutated, packed.tags.rows, packed.tags.cols, mask=mask)

        second_start = 3 * grid_len + 2
        diff = (out[0, second_start:] - base[0, second_start:]).abs().max()
        scale = base[0, second_start:].abs().max()
        assert (diff / scale).item() < 1e-5
        # and the first branch does change
        assert not torch.allclose(
            out[0, first], base[0, first], atol=1e-4
        )

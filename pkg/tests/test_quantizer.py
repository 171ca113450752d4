import numpy as np
import pytest
import torch

from viewpose import quantizer as vq
from viewpose.errors import DimensionMismatch, EmptyCounter, InsufficientSamples


def make_codebook(rows):
    return vq.Codebook(torch.tensor(rows, dtype=torch.float32))


class TestQuantize:
    def test_nearest_neighbor(self):
        cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
        res = vq.quantize(torch.tensor([[[0.2, 0.1]]]), cb)
        assert res.indices.item() == 0
        torch.testing.assert_close(res.quantized, torch.zeros(1, 1, 2))

    def test_loss_arithmetic(self):
        cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
        res = vq.quantize(torch.tensor([[[0.2, 0.1]]]), cb)
        assert res.codebook_loss.item() == pytest.approx(0.05, abs=1e-7)
        assert res.commitment_loss.item() == pytest.approx(0.05, abs=1e-7)

    def test_tie_breaks_to_smallest_index(self):
        cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
        res = vq.quantize(torch.tensor([[[0.5, 0.5]]]), cb)
        assert res.indices.item() == 0

    def test_matches_exhaustive_search(self):
        # brute-force oracle over 10^4 cases
        rng = np.random.default_rng(42)
        for _ in range(20):
            k, d = int(rng.integers(2, 40)), int(rng.integers(1, 8))
            book = rng.normal(size=(k, d)).astype(np.float32)
            feats = rng.normal(size=(500, d)).astype(np.float32)
            res = vq.quantize(torch.from_numpy(feats), vq.Codebook(torch.from_numpy(book)))
            brute = np.array([
                int(np.argmin([np.sum((f - c) ** 2) for c in book])) for f in feats
            ])
            np.testing.assert_array_equal(res.indices.numpy(), brute)

    def test_quantized_rows_are_exact_codebook_rows(self):
        rng = torch.Generator().manual_seed(1)
        cb = vq.Codebook(torch.randn(16, 4, generator=rng))
        feats = torch.randn(3, 5, 4, generator=rng)
        res = vq.quantize(feats, cb)
        torch.testing.assert_close(
            res.quantized, cb.vectors[res.indices], rtol=0, atol=0
        )

    def test_idempotent_on_own_output(self):
        rng = torch.Generator().manual_seed(2)
        cb = vq.Codebook(torch.randn(8, 3, generator=rng))
        feats = torch.randn(4, 4, 3, generator=rng)
        first = vq.quantize(feats, cb)
        second = vq.quantize(first.quantized, cb)
        torch.testing.assert_close(second.indices, first.indices, rtol=0, atol=0)

    def test_shift_invariance(self):
        rng = torch.Generator().manual_seed(3)
        cb_rows = torch.randn(8, 3, generator=rng)
        feats = torch.randn(6, 6, 3, generator=rng)
        shift = torch.tensor([0.3, -1.2, 2.0])
        a = vq.quantize(feats, vq.Codebook(cb_rows))
        b = vq.quantize(feats + shift, vq.Codebook(cb_rows + shift))
        torch.testing.assert_close(a.indices, b.indices, rtol=0, atol=0)

    def test_dimension_mismatch(self):
        cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
        with pytest.raises(DimensionMismatch):
            vq.quantize(torch.zeros(1, 1, 3), cb)


class TestStraightThrough:
    def test_forward_value(self):
        f = torch.tensor([0.2, 0.1], requires_grad=True)
        q = torch.tensor([0.0, 0.0])
        torch.testing.assert_close(vq.straight_through(f, q), q)

    def test_identity_gradient_at_quantized_zero(self):
        f = torch.tensor([0.2, 0.1], requires_grad=True)
        q = torch.tensor([0.0, 0.0])
        loss = (vq.straight_through(f, q) ** 2).sum()
        loss.backward()
        torch.testing.assert_close(f.grad, torch.zeros(2))

    def test_exact_feature_in_codebook_is_noop(self):
        cb = make_codebook([[0.2, 0.1], [5.0, 5.0]])
        f = torch.tensor([[[0.2, 0.1]]], requires_grad=True)
        res = vq.quantize(f, cb)
        out = vq.straight_through(f, res.quantized)
        torch.testing.assert_close(out, f)
        out.sum().backward()
        torch.testing.assert_close(f.grad, torch.ones_like(f))

    def test_gradient_matches_finite_differences(self):
        # Oracle: finite differences of the composite with the quantization
        # residual frozen at the base point (the linearization the
        # straight-through gradient asserts). Double precision throughout.
        torch.manual_seed(0)
        enc = torch.nn.Sequential(
            torch.nn.Linear(3, 8), torch.nn.Tanh(), torch.nn.Linear(8, 4)
        ).double()
        dec = torch.nn.Linear(4, 1).double()
        cb = vq.Codebook(torch.randn(16, 4).double())
        x = torch.randn(10, 3).double()

        def pipeline_loss():
            f = enc(x)
            res = vq.quantize(f, cb)
            return dec(vq.straight_through(f, res.quantized)).pow(2).mean()

        loss = pipeline_loss()
        params = list(enc.parameters())
        grads = torch.autograd.grad(loss, params)

        with torch.no_grad():
            f0 = enc(x)
            residual = vq.quantize(f0, cb).quantized - f0

        def frozen_loss():
            return dec(enc(x) + residual).pow(2).mean()

        eps = 1e-5
        for p, g in zip(params, grads):
            flat = p.data.view(-1)
            for slot in range(0, flat.numel(), max(1, flat.numel() // 5)):
                orig = flat[slot].item()
                flat[slot] = orig + eps
                up = frozen_loss().item()
                flat[slot] = orig - eps
                down = frozen_loss().item()
                flat[slot] = orig
                fd = (up - down) / (2 * eps)
                an = g.view(-1)[slot].item()
                assert an == pytest.approx(fd, rel=1e-3, abs=1e-9)


class TestVqLoss:
    def test_weighted_sum(self):
        res = vq.QuantizeResult(
            indices=torch.zeros(1, dtype=torch.long),
            quantized=torch.zeros(1, 2),
            codebook_loss=torch.tensor(0.05),
            commitment_loss=torch.tensor(0.05),
        )
        assert vq.vq_loss(res, 0.25).item() == pytest.approx(0.0625, abs=1e-8)
        assert vq.vq_loss(res, 0.0).item() == pytest.approx(0.05, abs=1e-8)

    def test_zero_iff_perfect(self):
        cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
        res = vq.quantize(torch.tensor([[[1.0, 1.0]]]), cb)
        assert vq.vq_loss(res, 0.25).item() == 0.0
        res = vq.quantize(torch.tensor([[[1.0, 0.9]]]), cb)
        assert vq.vq_loss(res, 0.25).item() > 0.0


class TestUsage:
    def test_fraction(self):
        counter = vq.UsageCounter.for_codebook_size(4)
        counter.update(np.array([0, 1, 1, 3]))
        assert vq.usage(counter) == pytest.approx(0.75)

    def test_all_seen(self):
        counter = vq.UsageCounter.for_codebook_size(4)
        counter.update(np.arange(4))
        assert vq.usage(counter) == 1.0

    def test_empty_raises(self):
        with pytest.raises(EmptyCounter):
            vq.usage(vq.UsageCounter.for_codebook_size(4))

    def test_monotone_under_accumulation(self):
        rng = np.random.default_rng(0)
        counter = vq.UsageCounter.for_codebook_size(64)
        prev = 0.0
        for _ in range(10):
            counter.update(rng.integers(0, 64, size=8))
            cur = vq.usage(counter)
            assert cur >= prev
            prev = cur

    def test_merge_is_order_independent(self):
        rng = np.random.default_rng(1)
        batches = [rng.integers(0, 16, size=20) for _ in range(4)]
        a = vq.UsageCounter.for_codebook_size(16)
        b = vq.UsageCounter.for_codebook_size(16)
        for batch in batches:
            part = vq.UsageCounter.for_codebook_size(16)
            part.update(batch)
            a.merge(part)
        for batch in reversed(batches):
            part = vq.UsageCounter.for_codebook_size(16)
            part.update(batch)
            b.merge(part)
        np.testing.assert_array_equal(a.counts, b.counts)
        assert a.total == b.total

    def test_full_scale_reference_table(self):
        ref = vq.FULL_SCALE_CAMERA_USAGE_REFERENCE
        assert ref[(2048, 4)] == 0.904
        assert ref[(2048, 8)] == 0.131


class TestInitCodebook:
    def test_deterministic(self):
        a = vq.init_codebook(7, 16, 4)
        b = vq.init_codebook(7, 16, 4)
        torch.testing.assert_close(a.vectors, b.vectors, rtol=0, atol=0)
        assert a.vectors.abs().max().item() <= 1 / 16

    def test_data_driven_draws_from_samples(self):
        samples = torch.tensor([[-1.0], [1.0]] * 8)
        cb = vq.init_codebook(0, 2, 1, sample_features=samples)
        for row in cb.vectors:
            assert row.item() in (-1.0, 1.0)

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientSamples):
            vq.init_codebook(0, 8, 1, sample_features=torch.zeros(3, 1))

    def test_data_driven_beats_uniform_usage_on_clustered_data(self):
        # fixed synthetic clustered set; measured before any training step
        rng = torch.Generator().manual_seed(5)
        centers = torch.randn(8, 4, generator=rng) * 5
        feats = (centers.repeat_interleave(32, dim=0)
                 + 0.05 * torch.randn(256, 4, generator=rng))
        uniform_cb = vq.init_codebook(0, 16, 4)
        data_cb = vq.init_codebook(0, 16, 4, sample_features=feats)
        scores = []
        for cb in (uniform_cb, data_cb):
            counter = vq.UsageCounter.for_codebook_size(16)
            counter.update(vq.quantize(feats, cb).indices)
            scores.append(vq.usage(counter))
        assert scores[1] > scores[0]

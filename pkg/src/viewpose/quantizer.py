"""Vector-quantization primitives shared by the image and camera tokenizers.

Nearest-neighbor quantization with a straight-through gradient, the
two-term codebook/commitment loss, and usage instrumentation. quantize and
vq_loss are pure; a UsageCounter must be updated from one thread at a time
(or merged from per-thread counters, which is order independent).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import DimensionMismatch, EmptyCounter, InsufficientSamples

DEFAULT_COMMITMENT_WEIGHT = 0.25

# Codebook usage fractions for camera tokenizers of various shapes observed
# at full training scale (orders of magnitude more data than desk runs);
# kept as a tuning reference, not a desk-scale target.
FULL_SCALE_CAMERA_USAGE_REFERENCE = {
    (1024, 4): 0.651,
    (2048, 2): 0.346,
    (2048, 4): 0.904,
    (2048, 8): 0.131,
    (4096, 2): 0.213,
    (4096, 4): 0.770,
}


class Codebook(nn.Module):
    """K learned d-dimensional embedding vectors."""

    def __init__(self, vectors: torch.Tensor):
        super().__init__()
        if vectors.ndim != 2 or vectors.shape[0] < 2:
            raise ValueError("codebook needs a (K, d) matrix with K >= 2")
        if not torch.isfinite(vectors).all():
            raise ValueError("codebook vectors must be finite")
        self.vectors = nn.Parameter(vectors.clone())

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def init_codebook(
    seed: int,
    size: int,
    dim: int,
    sample_features: torch.Tensor | None = None,
) -> Codebook:
    """Deterministic codebook init: uniform on [-1/K, 1/K], or K feature
    vectors drawn without replacement when sample_features is given."""
    if size < 2 or dim < 1:
        raise ValueError("need size >= 2 and dim >= 1")
    gen = torch.Generator().manual_seed(seed)
    if sample_features is None:
        vectors = (torch.rand((size, dim), generator=gen) * 2 - 1) / size
    else:
        flat = sample_features.detach().reshape(-1, sample_features.shape[-1])
        if flat.shape[1] != dim:
            raise DimensionMismatch(
                f"sample features have dim {flat.shape[1]}, expected {dim}"
            )
        if flat.shape[0] < size:
            raise InsufficientSamples(
                f"data-driven init needs >= {size} samples, got {flat.shape[0]}"
            )
        pick = torch.randperm(flat.shape[0], generator=gen)[:size]
        vectors = flat[pick].to(torch.float32)
    return Codebook(vectors)


@dataclass
class QuantizeResult:
    """Nearest-codeword assignment of a feature grid plus the two VQ losses."""

    indices: torch.Tensor        # (..., h, w) long
    quantized: torch.Tensor      # (..., h, w, d), exact codebook rows
    codebook_loss: torch.Tensor  # mean over cells of |sg[f] - z|^2
    commitment_loss: torch.Tensor  # mean over cells of |f - sg[z]|^2


def quantize(features: torch.Tensor, codebook: Codebook) -> QuantizeResult:
    """Assign each d-vector to its nearest codeword (Euclidean distance).

    Ties break toward the smallest index. Losses are per-cell squared L2
    norms averaged over cells, so magnitudes are resolution independent.
    """
    if features.shape[-1] != codebook.dim:
        raise DimensionMismatch(
            f"features have dim {features.shape[-1]}, codebook dim {codebook.dim}"
        )
    flat = features.reshape(-1, codebook.dim)
    vectors = codebook.vectors
    dist = (
        torch.sum(flat**2, dim=1, keepdim=True)
        + torch.sum(vectors**2, dim=1)
        - 2.0 * flat @ vectors.t()
    )
    indices = torch.argmin(dist, dim=1)  # argmin returns the first minimum
    quantized = vectors[indices]
    codebook_loss = torch.sum((flat.detach() - quantized) ** 2, dim=1).mean()
    commitment_loss = torch.sum((flat - quantized.detach()) ** 2, dim=1).mean()
    return QuantizeResult(
        indices=indices.reshape(features.shape[:-1]),
        quantized=quantized.reshape(features.shape),
        codebook_loss=codebook_loss,
        commitment_loss=commitment_loss,
    )


def straight_through(features: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward the quantized values, backpropagate as if identity in features."""
    if features.shape != quantized.shape:
        raise DimensionMismatch("features and quantized must share a shape")
    return features + (quantized - features).detach()


def vq_loss(result: QuantizeResult, commitment_weight: float = DEFAULT_COMMITMENT_WEIGHT) -> torch.Tensor:
    """Codebook loss plus weighted commitment loss."""
    if commitment_weight < 0:
        raise ValueError("commitment_weight must be >= 0")
    return result.codebook_loss + commitment_weight * result.commitment_loss


@dataclass
class UsageCounter:
    """Counts how often each codeword was selected."""

    counts: np.ndarray
    total: int = 0

    @classmethod
    def for_codebook_size(cls, size: int) -> "UsageCounter":
        return cls(counts=np.zeros(size, dtype=np.int64))

    def update(self, indices) -> None:
        idx = np.asarray(
            indices.detach().cpu().numpy() if torch.is_tensor(indices) else indices
        ).reshape(-1)
        self.counts += np.bincount(idx, minlength=len(self.counts))
        self.total += idx.size

    def merge(self, other: "UsageCounter") -> None:
        self.counts += other.counts
        self.total += other.total


def usage(counter: UsageCounter) -> float:
    """Fraction of codewords selected at least once."""
    if counter.total == 0:
        raise EmptyCounter("no indices accumulated")
    return float(np.count_nonzero(counter.counts)) / len(counter.counts)

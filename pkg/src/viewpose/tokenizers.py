"""Image and camera-map VQ tokenizers.

Both share the same shape: conv encoder with n stride-2 downsample blocks,
nearest-neighbor quantization against a learned codebook, and a mirrored
decoder with nearest-neighbor upsampling. The camera tokenizer is the same
design at reduced width, with no adversarial component anywhere. Images
live in [-1, 1]; camera maps are Plücker channel stacks (moments, then
directions) whose moment channels are divided by the pair-distance
threshold before encoding so both halves are O(1).

Hook points for a perceptual and an adversarial reconstruction term exist
on train_tokenizer but ship disabled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from .errors import InvalidIndex, NonFiniteLoss, ShapeMismatch
from .quantizer import (
    Codebook,
    DEFAULT_COMMITMENT_WEIGHT,
    QuantizeResult,
    UsageCounter,
    init_codebook,
    quantize,
    straight_through,
    usage,
    vq_loss,
)


@dataclass
class TokenGrid:
    """Grid of codebook indices for one tokenized input."""

    indices: np.ndarray
    modality: str  # "image" or "camera"

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2:
            raise ValueError("token grid must be 2-D")
        if self.modality not in ("image", "camera"):
            raise ValueError(f"unknown modality {self.modality!r}")


@dataclass(frozen=True)
class TokenizerConfig:
    modality: str                 # "image" or "camera"
    resolution: tuple[int, int]   # (H, W)
    input_channels: int = 3
    base_channels: int = 48
    num_downsamples: int = 2
    codebook_size: int = 512
    codebook_dim: int = 4
    moment_scale: float = geometry.DEFAULT_DISTANCE_THRESHOLD  # camera only

    def __post_init__(self):
        factor = 2 ** self.num_downsamples
        h, w = self.resolution
        if h % factor or w % factor:
            raise ValueError(
                f"resolution {self.resolution} not divisible by {factor}"
            )

    @property
    def grid_hw(self) -> tuple[int, int]:
        factor = 2 ** self.num_downsamples
        return self.resolution[0] // factor, self.resolution[1] // factor


def image_tokenizer_config(resolution: tuple[int, int], **kw) -> TokenizerConfig:
    return TokenizerConfig(
        modality="image", resolution=resolution, input_channels=3,
        base_channels=kw.pop("base_channels", 48), **kw,
    )


def camera_tokenizer_config(resolution: tuple[int, int], **kw) -> TokenizerConfig:
    return TokenizerConfig(
        modality="camera", resolution=resolution, input_channels=6,
        base_channels=kw.pop("base_channels", 20), **kw,
    )


class _ResidualUnit(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv2(F.silu(self.conv1(F.silu(x))))
        return x + h


class _Encoder(nn.Module):
    def __init__(self, in_channels, base, n_down, z_dim):
        super().__init__()
        layers = [nn.Conv2d(in_channels, base, 3, padding=1)]
        ch = base
        for _ in range(n_down):
            nxt = min(ch * 2, base * 4)
            layers += [nn.Conv2d(ch, nxt, 3, stride=2, padding=1),
                       _ResidualUnit(nxt), nn.SiLU()]
            ch = nxt
        layers.append(nn.Conv2d(ch, z_dim, 1))
        self.net = nn.Sequential(*layers)
        self.out_channels = ch

    def forward(self, x):
        return self.net(x)


class _Decoder(nn.Module):
    def __init__(self, out_channels, base, n_down, z_dim):
        super().__init__()
        chans = [base]
        for _ in range(n_down):
            chans.append(min(chans[-1] * 2, base * 4))
        layers = [nn.Conv2d(z_dim, chans[-1], 1)]
        for i in range(n_down, 0, -1):
            layers += [_ResidualUnit(chans[i]),
                       nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(chans[i], chans[i - 1], 3, padding=1),
                       nn.SiLU()]
        layers.append(nn.Conv2d(base, out_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class VQTokenizer(nn.Module):
    """Encoder, codebook, and decoder for one modality."""

    def __init__(self, config: TokenizerConfig, seed: int = 0):
        super().__init__()
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.encoder = _Encoder(
                config.input_channels, config.base_channels,
                config.num_downsamples, config.codebook_dim,
            )
            self.decoder = _Decoder(
                config.input_channels, config.base_channels,
                config.num_downsamples, config.codebook_dim,
            )
        self.codebook = init_codebook(seed, config.codebook_size, config.codebook_dim)

    def _check_input(self, x: torch.Tensor) -> None:
        h, w = self.config.resolution
        if x.ndim != 4 or x.shape[1] != self.config.input_channels \
                or x.shape[2] != h or x.shape[3] != w:
            raise ShapeMismatch(
                f"expected (B, {self.config.input_channels}, {h}, {w}), got {tuple(x.shape)}"
            )

    def encode_batch(self, x: torch.Tensor) -> tuple[torch.Tensor, QuantizeResult]:
        """(B, C, H, W) -> ((B, h, w) indices, QuantizeResult)."""
        self._check_input(x)
        features = self.encoder(x).permute(0, 2, 3, 1)  # (B, h, w, d)
        result = quantize(features, self.codebook)
        return result.indices, result

    def decode_batch(self, indices: torch.Tensor) -> torch.Tensor:
        """(B, h, w) indices -> (B, C, H, W) raw decoder output."""
        gh, gw = self.config.grid_hw
        if indices.ndim != 3 or indices.shape[1:] != (gh, gw):
            raise ShapeMismatch(
                f"expected (B, {gh}, {gw}) token grid, got {tuple(indices.shape)}"
            )
        if indices.min() < 0 or indices.max() >= self.config.codebook_size:
            raise InvalidIndex(
                f"token index outside [0, {self.config.codebook_size})"
            )
        z = self.codebook.vectors[indices]          # (B, h, w, d)
        return self.decoder(z.permute(0, 3, 1, 2))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, QuantizeResult]:
        """Training path: reconstruct through the straight-through bottleneck."""
        self._check_input(x)
        features = self.encoder(x).permute(0, 2, 3, 1)
        result = quantize(features, self.codebook)
        z = straight_through(features, result.quantized)
        recon = self.decoder(z.permute(0, 3, 1, 2))
        return recon, result

    # -- single-item numpy convenience API ---------------------------------

    def encode(self, array: np.ndarray) -> tuple[TokenGrid, QuantizeResult]:
        """(H, W, C) numpy input -> (TokenGrid, QuantizeResult)."""
        x = torch.from_numpy(
            np.ascontiguousarray(array, dtype=np.float32)
        ).permute(2, 0, 1)[None]
        with torch.no_grad():
            indices, result = self.encode_batch(x)
        return TokenGrid(indices[0].numpy(), self.config.modality), result

    def decode(self, tokens: TokenGrid) -> np.ndarray:
        """TokenGrid -> (H, W, C) numpy output; image outputs are clamped."""
        idx = torch.from_numpy(tokens.indices)[None]
        with torch.no_grad():
            out = self.decode_batch(idx)[0].permute(1, 2, 0).numpy()
        if self.config.modality == "image":
            out = np.clip(out, -1.0, 1.0)
        return out

    # -- camera-map helpers -------------------------------------------------

    def raymap_channels(self, raymap: geometry.RayMap) -> np.ndarray:
        """(H, W, 6) network input with moments divided by the scale."""
        ch = raymap.as_channels().astype(np.float32)
        ch[..., :3] /= self.config.moment_scale
        return ch

    def encode_raymap(self, raymap: geometry.RayMap) -> tuple[TokenGrid, QuantizeResult]:
        return self.encode(self.raymap_channels(raymap))

    def decode_raymap(self, tokens: TokenGrid) -> geometry.RayMap:
        """Decode, undo moment scaling, and project onto the Plücker constraints."""
        raw = self.decode(tokens).astype(np.float64)
        raw[..., :3] *= self.config.moment_scale
        return geometry.normalize_raymap(raw)


def image_reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all pixels and channels."""
    return F.mse_loss(x_hat, x)


def _batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, step])
    return rng.integers(0, n, size=batch_size)


def train_tokenizer(
    model: VQTokenizer,
    dataset: torch.Tensor,
    steps: int,
    batch_size: int,
    seed: int,
    lr: float = 1e-4,
    commitment_weight: float = DEFAULT_COMMITMENT_WEIGHT,
    grad_clip: float = 1.0,
    log_every: int = 50,
    data_init: bool = True,
    perceptual_loss=None,   # hook point, disabled
    adversarial_loss=None,  # hook point, disabled
) -> list[dict]:
    """AdamW training loop: reconstruction + VQ loss, gradient norm clip.

    dataset is an in-memory (N, C, H, W) float tensor; batch order is a
    pure function of (seed, step), so runs are deterministic and resumable.
    Returns per-window mean losses and codebook usage.
    """
    if perceptual_loss is not None or adversarial_loss is not None:
        raise NotImplementedError("perceptual/adversarial terms are not shipped")
    n = dataset.shape[0]
    if data_init:
        with torch.no_grad():
            first = dataset[_batch_indices(seed, 0, n, min(n, max(batch_size, 64)))]
            feats = model.encoder(first).permute(0, 2, 3, 1)
        fresh = init_codebook(
            seed, model.config.codebook_size, model.config.codebook_dim,
            sample_features=feats,
        )
        with torch.no_grad():
            model.codebook.vectors.copy_(fresh.vectors)

    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    counter = UsageCounter.for_codebook_size(model.config.codebook_size)
    log: list[dict] = []
    window_recon, window_total = [], []
    for step in range(steps):
        batch = dataset[_batch_indices(seed, step, n, batch_size)]
        recon, result = model(batch)
        rec_loss = image_reconstruction_loss(batch, recon)
        loss = rec_loss + vq_loss(result, commitment_weight)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(step)
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
        optimizer.step()
        counter.update(result.indices)
        window_recon.append(rec_loss.item())
        window_total.append(loss.item())
        if (step + 1) % log_every == 0:
            log.append({
                "step": step + 1,
                "window_recon": float(np.mean(window_recon)),
                "window_loss": float(np.mean(window_total)),
                "codebook_usage": usage(counter),
            })
            window_recon, window_total = [], []
    return log

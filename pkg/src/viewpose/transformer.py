"""Decoder-only next-token transformer backbone.

Pre-norm blocks with RMSNorm, per-head RMS-normalized queries/keys with a
learned scale (QK-Norm), and rotary position embeddings applied in 2D: the
first half of each head vector rotates by the token's grid row, the second
half by its grid column. Scalar positions (BOS, task ids) carry a reserved
index used for both halves. Supports arbitrary boolean attention masks for
training and cached incremental decoding for sampling.

forward and sample are read-only on the module state and safe to call
concurrently; a KVCache belongs to a single generation stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import SequenceTooLong


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    model_dim: int = 256
    num_heads: int = 8
    vocab_size: int = 1027
    max_seq_len: int = 256
    rope_base: float = 10000.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.head_dim % 4:
            raise ValueError("head_dim must be divisible by 4 for 2D rotations")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def _rotate_half(x: torch.Tensor, pos: torch.Tensor, base: float) -> torch.Tensor:
    """Standard rotary rotation of adjacent pairs by pos-scaled angles."""
    m = x.shape[-1]
    freqs = base ** (
        -torch.arange(0, m, 2, dtype=x.dtype, device=x.device) / (m / 2)
    )
    angles = pos.to(x.dtype)[..., None] * freqs          # (..., T, m/2)
    cos, sin = torch.cos(angles), torch.sin(angles)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out1 = x1 * cos - x2 * sin
    out2 = x1 * sin + x2 * cos
    return torch.stack([out1, out2], dim=-1).flatten(-2)


def rope2d(
    x: torch.Tensor,
    rows: torch.Tensor,
    cols: torch.Tensor,
    base: float = 10000.0,
) -> torch.Tensor:
    """Rotate (..., T, head_dim) vectors by their 2D grid position.

    Norm preserving; attention dot products depend only on the row and
    column offsets between the query and key positions.
    """
    if x.shape[-1] % 4:
        raise ValueError("head_dim must be divisible by 4")
    half = x.shape[-1] // 2
    return torch.cat(
        [
            _rotate_half(x[..., :half], rows, base),
            _rotate_half(x[..., half:], cols, base),
        ],
        dim=-1,
    )


def qk_norm(
    q: torch.Tensor,
    k: torch.Tensor,
    q_scale: torch.Tensor | None = None,
    k_scale: torch.Tensor | None = None,
    eps: float = 1e-6,
) -> tuple[torch.Tensor, torch.Tensor]:
    """RMS-normalize each query/key vector, then scale by a learned scalar."""

    def norm(x, scale):
        rms = torch.sqrt(torch.mean(x * x, dim=-1, keepdim=True) + eps)
        out = x / rms
        return out if scale is None else out * scale

    return norm(q, q_scale), norm(k, k_scale)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        rms = torch.sqrt(torch.mean(x * x, dim=-1, keepdim=True) + self.eps)
        return x / rms * self.weight


class KVCache:
    """Per-layer key/value tensors for one incremental decoding stream."""

    def __init__(self, config: ModelConfig, batch_size: int = 1,
                 dtype: torch.dtype = torch.float32):
        shape = (batch_size, config.num_heads, config.max_seq_len, config.head_dim)
        self.k = [torch.zeros(shape, dtype=dtype) for _ in range(config.num_layers)]
        self.v = [torch.zeros(shape, dtype=dtype) for _ in range(config.num_layers)]
        self.length = 0
        self.max_seq_len = config.max_seq_len


class _Attention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.qkv = nn.Linear(config.model_dim, 3 * config.model_dim, bias=False)
        self.proj = nn.Linear(config.model_dim, config.model_dim, bias=False)
        self.q_scale = nn.Parameter(torch.ones(config.num_heads, 1, 1))
        self.k_scale = nn.Parameter(torch.ones(config.num_heads, 1, 1))

    def forward(self, x, rows, cols, mask, cache: KVCache | None, layer: int):
        b, t, _ = x.shape
        heads, hd = self.config.num_heads, self.config.head_dim
        q, k, v = self.qkv(x).split(self.config.model_dim, dim=2)
        q = q.view(b, t, heads, hd).transpose(1, 2)
        k = k.view(b, t, heads, hd).transpose(1, 2)
        v = v.view(b, t, heads, hd).transpose(1, 2)
        q, k = qk_norm(q, k, self.q_scale, self.k_scale)
        q = rope2d(q, rows, cols, self.config.rope_base)
        k = rope2d(k, rows, cols, self.config.rope_base)

        if cache is not None:
            start = cache.length
            cache.k[layer][:, :, start:start + t] = k
            cache.v[layer][:, :, start:start + t] = v
            k = cache.k[layer][:, :, : start + t]
            v = cache.v[layer][:, :, : start + t]

        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = att.masked_fill(~mask, float("-inf"))
        att = F.softmax(att, dim=-1)
        y = att @ v
        y = y.transpose(1, 2).contiguous().view(b, t, self.config.model_dim)
        return self.proj(y)


class _GatedMlp(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        hidden = 4 * config.model_dim
        self.w_gate = nn.Linear(config.model_dim, hidden, bias=False)
        self.w_up = nn.Linear(config.model_dim, hidden, bias=False)
        self.w_down = nn.Linear(hidden, config.model_dim, bias=False)

    def forward(self, x):
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))


class _Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.norm1 = RMSNorm(config.model_dim)
        self.attn = _Attention(config)
        self.norm2 = RMSNorm(config.model_dim)
        self.mlp = _GatedMlp(config)

    def forward(self, x, rows, cols, mask, cache, layer):
        x = x + self.attn(self.norm1(x), rows, cols, mask, cache, layer)
        return x + self.mlp(self.norm2(x))


class GstModel(nn.Module):
    """Next-token transformer over the unified image/camera/task vocabulary."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.embed = nn.Embedding(config.vocab_size, config.model_dim)
            self.blocks = nn.ModuleList(
                _Block(config) for _ in range(config.num_layers)
            )
            self.final_norm = RMSNorm(config.model_dim)
            self.head = nn.Linear(config.model_dim, config.vocab_size, bias=False)
            self._init_weights()

    def _init_weights(self):
        residual_scale = 1.0 / math.sqrt(2 * self.config.num_layers)
        for name, p in self.named_parameters():
            if p.ndim < 2:
                continue  # norm gains and qk scales stay at 1
            std = 0.02
            if name.endswith(("proj.weight", "w_down.weight")):
                std *= residual_scale
            nn.init.normal_(p, mean=0.0, std=std)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @staticmethod
    def _as_tensor(x, dtype=torch.long):
        if isinstance(x, np.ndarray):
            return torch.from_numpy(x).to(dtype)
        return x.to(dtype)

    def forward(
        self,
        ids,
        rows,
        cols,
        mask=None,
        cache: KVCache | None = None,
    ) -> torch.Tensor:
        """Logits over the vocabulary per position, shape (B, T, V).

        ids: (B, T) or (T,); rows/cols: (T,) position tags shared across the
        batch. mask: (T, T) boolean, True where attention is allowed;
        defaults to causal. With a cache, positions are appended after the
        cache fill and attention is causal over cached plus new positions.
        """
        ids = self._as_tensor(ids)
        if ids.ndim == 1:
            ids = ids[None]
        rows = self._as_tensor(rows)
        cols = self._as_tensor(cols)
        b, t = ids.shape
        start = cache.length if cache is not None else 0
        if start + t > self.config.max_seq_len:
            raise SequenceTooLong(
                f"{start + t} positions exceed max_seq_len={self.config.max_seq_len}"
            )
        if cache is not None:
            total = start + t
            key_pos = torch.arange(total)
            query_pos = torch.arange(start, total)
            attn_mask = key_pos[None, :] <= query_pos[:, None]
        elif mask is None:
            attn_mask = torch.tril(torch.ones(t, t, dtype=torch.bool))
        else:
            attn_mask = mask.matrix if hasattr(mask, "matrix") else mask
            if isinstance(attn_mask, np.ndarray):
                attn_mask = torch.from_numpy(attn_mask)
            if attn_mask.shape != (t, t):
                raise ValueError(f"mask shape {tuple(attn_mask.shape)} != ({t}, {t})")

        x = self.embed(ids)
        for layer, block in enumerate(self.blocks):
            x = block(x, rows, cols, attn_mask, cache, layer)
        if cache is not None:
            cache.length += t
        return self.head(self.final_norm(x))


def sample(
    model: GstModel,
    prefix_ids: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
    steps: int,
    seed: int,
    temperature: float = 1.0,
    top_k: int | None = None,
    allowed_range: tuple[int, int] | None = None,
    use_cache: bool = True,
) -> np.ndarray:
    """Generate `steps` tokens after the prefix; returns only the new ids.

    rows/cols must cover prefix plus all generated positions (segment
    layouts are fixed length, so they are known up front). allowed_range
    restricts every sampled id to [lo, hi) (constrained decoding).
    temperature 0 means argmax. Deterministic given seed; with use_cache
    off, the full sequence is re-run each step (the equivalence oracle).
    """
    n = len(prefix_ids)
    if len(rows) < n + steps or len(cols) < n + steps:
        raise ValueError("position tags must cover prefix plus generated steps")
    gen = torch.Generator().manual_seed(seed)
    ids = np.asarray(prefix_ids, dtype=np.int64).copy()
    cache = KVCache(model.config) if use_cache else None
    out = []
    with torch.no_grad():
        if use_cache:
            logits = model(ids, rows[:n], cols[:n], cache=cache)[0, -1]
        for step in range(steps):
            if not use_cache:
                t = n + step
                logits = model(ids, rows[:t], cols[:t])[0, -1]
            next_id = _pick(logits, temperature, top_k, allowed_range, gen)
            out.append(next_id)
            ids = np.append(ids, next_id)
            if use_cache and step + 1 < steps:
                t = n + step
                logits = model(
                    ids[-1:], rows[t:t + 1], cols[t:t + 1], cache=cache
                )[0, -1]
    return np.array(out, dtype=np.int64)


def _pick(logits, temperature, top_k, allowed_range, gen) -> int:
    logits = logits.clone()
    if allowed_range is not None:
        lo, hi = allowed_range
        keep = torch.zeros_like(logits, dtype=torch.bool)
        keep[lo:hi] = True
        logits[~keep] = float("-inf")
    if temperature <= 0.0:
        return int(torch.argmax(logits).item())
    logits = logits / temperature
    if top_k is not None and top_k < logits.shape[-1]:
        kth = torch.topk(logits, top_k).values[-1]
        logits[logits < kth] = float("-inf")
    probs = F.softmax(logits, dim=-1)
    return int(torch.multinomial(probs, 1, generator=gen).item())

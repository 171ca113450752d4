"""Evaluation metrics and the line-delimited metrics log.

PSNR uses peak 2 (images live in [-1, 1]) and is capped at 99 dB. SSIM
uses a 7x7 Gaussian window with sigma 1.5 and the standard constants on
images remapped to [0, 1].
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 2.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2D correlation, valid region only."""
    size = len(kernel)
    h, w = img.shape
    out = np.zeros((h - size + 1, w), dtype=np.float64)
    for i in range(size):
        out += kernel[i] * img[i: h - size + 1 + i, :]
    final = np.zeros((h - size + 1, w - size + 1), dtype=np.float64)
    for j in range(size):
        final += kernel[j] * out[:, j: w - size + 1 + j]
    return final


def ssim(a: np.ndarray, b: np.ndarray, window: int = 7, sigma: float = 1.5) -> float:
    """Mean SSIM over channels of two [-1, 1] images of shape (H, W, C)."""
    a01 = (np.asarray(a, np.float64) + 1.0) / 2.0
    b01 = (np.asarray(b, np.float64) + 1.0) / 2.0
    if a01.ndim == 2:
        a01, b01 = a01[..., None], b01[..., None]
    c1 = 0.01**2
    c2 = 0.03**2
    kernel = _gaussian_window(window, sigma)
    scores = []
    for ch in range(a01.shape[2]):
        x, y = a01[..., ch], b01[..., ch]
        mu_x = _filter_valid(x, kernel)
        mu_y = _filter_valid(y, kernel)
        var_x = _filter_valid(x * x, kernel) - mu_x**2
        var_y = _filter_valid(y * y, kernel) - mu_y**2
        cov = _filter_valid(x * y, kernel) - mu_x * mu_y
        score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        )
        scores.append(score.mean())
    return float(np.mean(scores))


class MetricsLog:
    """Accumulates 50-step training windows and writes LDJSON records."""

    def __init__(self, path: str | Path | None = None, window: int = 50):
        self.path = Path(path) if path else None
        self.window = window
        self.records: list[dict] = []
        self._losses: list[float] = []
        self._grad_norms: list[float] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def _emit(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def push_step(self, step: int, loss: float, grad_norm: float) -> None:
        self._losses.append(loss)
        self._grad_norms.append(grad_norm)
        if len(self._losses) == self.window:
            self._emit({
                "kind": "train_window",
                "step": step + 1,
                "window_loss": float(np.mean(self._losses)),
                "window_grad_norm": float(np.mean(self._grad_norms)),
            })
            self._losses = []
            self._grad_norms = []

    def emit_eval(self, payload: dict) -> None:
        self._emit({"kind": "eval", **payload})

    def windows(self) -> list[dict]:
        return [r for r in self.records if r.get("kind") == "train_window"]


def read_metrics(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]

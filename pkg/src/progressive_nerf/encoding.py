"""Fourier positional encoding of scene coordinates.

Output layout is frequency-major, then dimension, then (sin, cos):
``[sin(x0), cos(x0), sin(x1), cos(x1), sin(x2), cos(x2), sin(2 x0), ...]``.
"""

from __future__ import annotations

import dataclasses

import numpy as np


@dataclasses.dataclass(frozen=True)
class EncodingConfig:
    M_pos: int = 11
    M_dir: int = 4
    scene_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scene_radius: float = float(np.pi)
    window_alpha: float | None = None

    def __post_init__(self):
        if self.M_pos < 1:
            raise ValueError(f"M_pos must be >= 1, got {self.M_pos}")
        if self.M_dir < 0:
            raise ValueError(f"M_dir must be >= 0, got {self.M_dir}")
        if self.scene_radius <= 0:
            raise ValueError(f"scene_radius must be positive, got {self.scene_radius}")
        if self.window_alpha is not None and not 0 <= self.window_alpha <= self.M_pos:
            raise ValueError(f"window_alpha must lie in [0, {self.M_pos}]")

    @property
    def pos_width(self) -> int:
        return 6 * self.M_pos

    @property
    def dir_width(self) -> int:
        return 6 * self.M_dir


def normalize_position(x, config: EncodingConfig) -> np.ndarray:
    """Map the scene sphere onto [-pi, pi]^3, clamping points outside it."""
    if config.scene_radius <= 0:
        raise ValueError("scene_radius must be positive")
    x = np.asarray(x)
    out = np.pi * (x - np.asarray(config.scene_center, dtype=x.dtype)) / config.scene_radius
    return np.clip(out, -np.pi, np.pi)


def encode(x_norm, M: int) -> np.ndarray:
    """``sin(2^j x), cos(2^j x)`` for j < M over the last axis (of size 3)."""
    x = np.asarray(x_norm)
    if M == 0:
        return np.zeros(x.shape[:-1] + (0,), dtype=x.dtype)
    freqs = (2.0 ** np.arange(M)).astype(x.dtype)
    scaled = x[..., None, :] * freqs[:, None]  # (..., M, 3)
    out = np.stack([np.sin(scaled), np.cos(scaled)], axis=-1)  # (..., M, 3, 2)
    return out.reshape(x.shape[:-1] + (6 * M,))


def window_weights(M: int, alpha: float) -> np.ndarray:
    """Per-band weights ``(1 - cos(pi * clamp(alpha - j, 0, 1))) / 2``."""
    if not 0 <= alpha <= M:
        raise ValueError(f"alpha must lie in [0, {M}], got {alpha}")
    j = np.arange(M)
    return (1.0 - np.cos(np.pi * np.clip(alpha - j, 0.0, 1.0))) / 2.0


def windowed_encode(x_norm, M: int, alpha: float) -> np.ndarray:
    x = np.asarray(x_norm)
    w = np.repeat(window_weights(M, alpha), 6).astype(x.dtype)
    return encode(x, M) * w


def band_of_entry(M: int) -> np.ndarray:
    """Frequency index of every encoding entry, e.g. for weight diagnostics."""
    return np.repeat(np.arange(M), 6)

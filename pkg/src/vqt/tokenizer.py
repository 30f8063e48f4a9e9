"""Clip tokenization: patchify, linear embedding, positional table, quality token.

Patches are numbered row-major within a frame; each patch is flattened in
(row, col, channel) order. Positional slot 0 belongs to the quality token,
slot ``1 + t * N + p`` to patch ``p`` of frame ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as vt
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    """Clip or model dimensions are inconsistent."""


@dataclass
class TokenGrid:
    tokens: Tensor  # (T, N, d)
    quality_token: Tensor  # (1, d)
    pos_embedding_applied: bool = True


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """(T, H, W, C) -> (T, N, P*P*C)."""
    T, H, W, C = frames.shape
    if H % patch or W % patch:
        raise ConfigError(f"H={H}, W={W} not divisible by patch size P={patch}")
    gh, gw = H // patch, W // patch
    x = frames.reshape(T, gh, patch, gw, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(T, gh * gw, patch * patch * C))


def unpatchify(patches: np.ndarray, patch: int, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    T, N, D = patches.shape
    C = D // (patch * patch)
    gh, gw = height // patch, width // patch
    if gh * gw != N or C * patch * patch != D:
        raise ConfigError(f"cannot fold {patches.shape} into {height}x{width} with P={patch}")
    x = patches.reshape(T, gh, gw, patch, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(T, height, width, C))


def embed(patches: np.ndarray | Tensor, w_embed: Tensor, pos: Tensor,
          quality_token: Tensor) -> TokenGrid:
    """Z = X W^T + E_pos on patch tokens; the quality token gets slot 0."""
    x = patches if isinstance(patches, Tensor) else Tensor(patches, dtype=w_embed.dtype)
    T, N, D = x.shape
    d = w_embed.shape[0]
    if w_embed.shape[1] != D:
        raise ShapeError(f"embed: patches {x.shape} vs w_embed {w_embed.shape}")
    if pos.shape != (T * N + 1, d):
        raise ShapeError(f"embed: pos {pos.shape}, expected {(T * N + 1, d)}")
    if quality_token.shape != (1, d):
        raise ShapeError(f"embed: quality token {quality_token.shape}, expected {(1, d)}")
    z = vt.matmul(x, vt.transpose(w_embed))
    pos_patch = vt.reshape(vt.take(pos, np.arange(1, T * N + 1), axis=0), (T, N, d))
    tokens = vt.add(z, pos_patch)
    quality = vt.add(quality_token, vt.take(pos, [0], axis=0))
    return TokenGrid(tokens, quality)

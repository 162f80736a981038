#!/usr/bin/env python3
"""Numerical building blocks of the decoder stack.

All functions are pure: float32 numpy arrays in, new float32 arrays out.
Attention and RoPE accumulate in float64 and round once on the way out.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from errors import GroupingError, InvalidConfig, OddHeadDim, ShapeMismatch


Tensor = np.ndarray

DEFAULT_ROPE_THETA = 10000.0


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float32)


@dataclass(frozen=True)
class AttentionGeometry:
    """Head layout of one attention block."""
    n_heads: int
    n_kv_heads: int
    head_dim: int
    rope_theta: float = DEFAULT_ROPE_THETA

    @property
    def hidden_size(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def validate(self) -> None:
        if min(self.n_heads, self.n_kv_heads, self.head_dim) < 1:
            raise InvalidConfig("attention dimensions must be positive")
        if self.n_heads % self.n_kv_heads:
            raise GroupingError(f"{self.n_heads} heads not divisible by {self.n_kv_heads} kv heads")
        if self.head_dim % 2:
            raise OddHeadDim(f"head_dim {self.head_dim} must be even for RoPE")
        if self.rope_theta <= 0:
            raise InvalidConfig("rope_theta must be positive")


def linear_nobias(x: Tensor, W: Tensor) -> Tensor:
    """y = x @ W.T for W laid out as [out, in]. There is no bias anywhere."""
    x = as_tensor(x)
    W = as_tensor(W)
    if W.ndim != 2 or x.ndim < 1 or x.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"linear: x{tuple(x.shape)} vs W{tuple(W.shape)}")
    return np.matmul(x, W.T).astype(np.float32, copy=False)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * weight over the last axis.

    An all-zero vector normalizes to zeros, including when eps is 0.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    if eps < 0:
        raise InvalidConfig("rms_norm eps must be non-negative")
    if weight.ndim != 1 or x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"rms_norm: x{tuple(x.shape)} vs weight{tuple(weight.shape)}")
    denom = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + np.float32(eps))
    normed = np.divide(x, denom, out=np.zeros_like(x), where=denom > 0)
    return (normed * weight).astype(np.float32, copy=False)


def rope_tables(positions: Sequence[int], head_dim: int,
                theta: float = DEFAULT_ROPE_THETA) -> Tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [T, head_dim // 2] in float64."""
    if head_dim % 2:
        raise OddHeadDim(f"head_dim {head_dim} must be even")
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(pos, inv_freq)
    return np.cos(angles), np.sin(angles)


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive pairs (x[2j], x[2j+1]) of x[T, heads, d] by the given angles."""
    x64 = np.asarray(x, dtype=np.float64)
    even = x64[..., 0::2]
    odd = x64[..., 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(x64)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out.astype(np.float32)


def apply_rope(q: Tensor, k: Tensor, positions: Sequence[int],
               theta: float = DEFAULT_ROPE_THETA) -> Tuple[Tensor, Tensor]:
    """Rotary position embedding for q[T, n_heads, d] and k[T, n_kv_heads, d]."""
    q = as_tensor(q)
    k = as_tensor(k)
    if q.ndim != 3 or k.ndim != 3 or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeMismatch(f"rope: q{tuple(q.shape)} vs k{tuple(k.shape)}")
    if q.shape[2] % 2:
        raise OddHeadDim(f"head_dim {q.shape[2]} must be even")
    if len(positions) != q.shape[0]:
        raise ShapeMismatch(f"rope: {len(positions)} positions for {q.shape[0]} rows")
    cos, sin = rope_tables(positions, q.shape[2], theta)
    return rotate_pairs(q, cos, sin), rotate_pairs(k, cos, sin)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def silu(z: Tensor) -> Tensor:
    z = as_tensor(z)
    # sigmoid(z) = exp(-log(1 + exp(-z))) without overflow
    return (z * np.exp(-np.logaddexp(np.float32(0.0), -z))).astype(np.float32, copy=False)


def _check_attention_shapes(q: Tensor, k: Tensor, v: Tensor, causal: bool) -> int:
    if q.ndim != 3 or k.ndim != 3 or k.shape != v.shape:
        raise ShapeMismatch(f"attention: q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    if q.shape[2] != k.shape[2]:
        raise ShapeMismatch(f"attention: head_dim {q.shape[2]} vs {k.shape[2]}")
    n_heads, n_kv = q.shape[1], k.shape[1]
    if n_kv < 1 or n_heads % n_kv:
        raise GroupingError(f"{n_heads} query heads not divisible by {n_kv} kv heads")
    if causal and q.shape[0] > k.shape[0]:
        raise ShapeMismatch(f"causal attention needs T <= S, got T={q.shape[0]} S={k.shape[0]}")
    return n_heads // n_kv


def _causal_mask(T: int, S: int) -> np.ndarray:
    """True where query i may NOT see key j (j > i + S - T)."""
    return np.arange(S)[None, :] > (np.arange(T)[:, None] + (S - T))


def gqa_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = True,
                  scale: Optional[float] = None) -> Tensor:
    """Grouped-query scaled dot-product attention (reference evaluation).

    q: [T, n_heads, d]; k, v: [S, n_kv_heads, d]. Query head h reads kv head
    h // (n_heads // n_kv_heads).
    """
    q = as_tensor(q)
    k = as_tensor(k)
    v = as_tensor(v)
    group = _check_attention_shapes(q, k, v, causal)
    T, S, d = q.shape[0], k.shape[0], q.shape[2]
    if scale is None:
        scale = 1.0 / np.sqrt(d)

    k64 = np.repeat(k.astype(np.float64), group, axis=1)
    v64 = np.repeat(v.astype(np.float64), group, axis=1)
    scores = np.einsum("thd,shd->hts", q.astype(np.float64), k64) * scale
    if causal:
        scores = np.where(_causal_mask(T, S)[None, :, :], -np.inf, scores)
    probs = softmax(scores, axis=-1)
    out = np.einsum("hts,shd->thd", probs, v64)
    return out.astype(np.float32)


def gqa_attention_tiled(q: Tensor, k: Tensor, v: Tensor, causal: bool = True,
                        scale: Optional[float] = None, block_size: int = 64) -> Tensor:
    """Streaming attention over key blocks with an online softmax.

    Never materializes the full [T, S] score matrix; matches gqa_attention
    within 1e-5.
    """
    q = as_tensor(q)
    k = as_tensor(k)
    v = as_tensor(v)
    group = _check_attention_shapes(q, k, v, causal)
    if block_size < 1:
        raise InvalidConfig("block_size must be >= 1")
    T, H, d = q.shape
    S = k.shape[0]
    if scale is None:
        scale = 1.0 / np.sqrt(d)

    q64 = q.astype(np.float64)
    running_max = np.full((H, T), -np.inf)
    running_sum = np.zeros((H, T))
    acc = np.zeros((H, T, d))
    rows = np.arange(T)[:, None] + (S - T)

    for start in range(0, S, block_size):
        stop = min(start + block_size, S)
        kb = np.repeat(k[start:stop].astype(np.float64), group, axis=1)
        vb = np.repeat(v[start:stop].astype(np.float64), group, axis=1)
        scores = np.einsum("thd,shd->hts", q64, kb) * scale
        if causal:
            masked = np.arange(start, stop)[None, :] > rows
            if masked.all():
                continue
            scores = np.where(masked[None, :, :], -np.inf, scores)
        block_max = np.max(scores, axis=-1)
        new_max = np.maximum(running_max, block_max)
        # rows with nothing visible yet keep a -inf max; exp terms stay 0
        safe_max = np.where(np.isfinite(new_max), new_max, 0.0)
        correction = np.exp(np.where(np.isfinite(running_max), running_max - safe_max, -np.inf))
        p = np.exp(scores - safe_max[..., None])
        running_sum = running_sum * correction + p.sum(axis=-1)
        acc = acc * correction[..., None] + np.einsum("hts,shd->htd", p, vb)
        running_max = new_max

    out = acc / running_sum[..., None]
    return np.transpose(out, (1, 0, 2)).astype(np.float32)


def swiglu_ffn(x: Tensor, W_gate: Tensor, W_up: Tensor, W_down: Tensor) -> Tensor:
    """W_down · (silu(W_gate·x) ⊙ (W_up·x))."""
    W_gate = as_tensor(W_gate)
    W_up = as_tensor(W_up)
    W_down = as_tensor(W_down)
    if W_gate.shape != W_up.shape or W_down.ndim != 2 or W_down.shape[::-1] != W_gate.shape:
        raise ShapeMismatch(
            f"swiglu: gate{tuple(W_gate.shape)} up{tuple(W_up.shape)} down{tuple(W_down.shape)}")
    hidden = silu(linear_nobias(x, W_gate)) * linear_nobias(x, W_up)
    return linear_nobias(hidden, W_down)

#!/usr/bin/env python3
"""KV-Cache for incremental decoding - per-layer key/value storage

- One cache per generation session (single writer)
- Positions < cur_len are immutable once written
- Storage grows geometrically up to max_seq_len
- Basic reuse statistics, reported the same way as the old prompt cache
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Tuple

import numpy as np

from errors import ContextOverflow, ShapeMismatch


@dataclass
class CacheStats:
    """Cache statistics"""
    appended_tokens: int = 0  # positions written
    reused_tokens: int = 0  # cached positions read back instead of recomputed
    forward_calls: int = 0
    reuse_rate: float = 0.0


class KVCache:
    """Per-layer key/value tensors of logical length ``cur_len``.

    A forward pass writes its new keys/values for every layer at
    ``cur_len .. cur_len+T`` and then calls ``advance(T)``.
    """

    INITIAL_CAPACITY = 64

    def __init__(self, n_layers: int, max_seq_len: int, n_kv_heads: int, head_dim: int):
        self.n_layers = n_layers
        self.max_seq_len = max_seq_len
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.cur_len = 0
        self.stats = CacheStats()

        capacity = min(self.INITIAL_CAPACITY, max_seq_len)
        shape = (capacity, n_kv_heads, head_dim)
        self._keys: List[np.ndarray] = [np.zeros(shape, np.float32) for _ in range(n_layers)]
        self._values: List[np.ndarray] = [np.zeros(shape, np.float32) for _ in range(n_layers)]

    @property
    def capacity(self) -> int:
        return self._keys[0].shape[0] if self._keys else 0

    def remaining(self) -> int:
        return self.max_seq_len - self.cur_len

    def _grow(self, needed: int) -> None:
        capacity = self.capacity
        if needed <= capacity:
            return
        new_capacity = max(capacity, 1)
        while new_capacity < needed:
            new_capacity *= 2
        new_capacity = min(new_capacity, self.max_seq_len)
        for store in (self._keys, self._values):
            for i, old in enumerate(store):
                grown = np.zeros((new_capacity,) + old.shape[1:], np.float32)
                grown[:self.cur_len] = old[:self.cur_len]
                store[i] = grown

    def write(self, layer: int, keys: np.ndarray, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Store keys/values for positions cur_len.. and return the full visible prefix."""
        T = keys.shape[0]
        if keys.shape != values.shape or keys.shape[1:] != (self.n_kv_heads, self.head_dim):
            raise ShapeMismatch(f"kv cache write: keys{keys.shape} values{values.shape}")
        end = self.cur_len + T
        if end > self.max_seq_len:
            raise ContextOverflow(f"kv cache holds {self.cur_len}, cannot add {T} (max {self.max_seq_len})")
        self._grow(end)
        self._keys[layer][self.cur_len:end] = keys
        self._values[layer][self.cur_len:end] = values
        return self._keys[layer][:end], self._values[layer][:end]

    def advance(self, T: int) -> None:
        """Commit T new positions after every layer has been written."""
        self.stats.reused_tokens += self.cur_len
        self.stats.appended_tokens += T
        self.stats.forward_calls += 1
        self.cur_len += T

    def get_stats(self) -> Dict[str, Any]:
        """Get cache statistics

        Returns:
            Dictionary with cache statistics
        """
        total = self.stats.reused_tokens + self.stats.appended_tokens
        self.stats.reuse_rate = self.stats.reused_tokens / total if total > 0 else 0.0
        return {
            "cur_len": self.cur_len,
            "max_seq_len": self.max_seq_len,
            "capacity": self.capacity,
            "appended_tokens": self.stats.appended_tokens,
            "reused_tokens": self.stats.reused_tokens,
            "forward_calls": self.stats.forward_calls,
            "reuse_rate": self.stats.reuse_rate,
        }

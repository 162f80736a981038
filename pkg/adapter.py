#!/usr/bin/env python3
"""Rank-r adapters: additive (alpha/rank)·B·A deltas on projection outputs.

Adapters are applied by the engine at inference time and never merged into
base weights, so detaching restores the base model exactly.

UNLA file layout:
    b"UNLA" | u32 version | u64 header length | JSON header | f32 payload
The payload holds A then B for every (layer, target) in layer-major order.
"""

import base64
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from errors import (
    ConfigMismatch,
    InvalidTarget,
    MalformedFile,
    RankZero,
    ShapeMismatch,
    UnsupportedVersion,
)
from model import PROJECTIONS, Engine, ModelConfig


logger = logging.getLogger(__name__)

ADAPTER_MAGIC = b"UNLA"
ADAPTER_VERSION = 1
DEFAULT_TARGETS = ("wq", "wk", "wv", "wo")
INIT_SIGMA = 0.02
_PREAMBLE = struct.Struct("<4sIQ")


@dataclass(frozen=True)
class AdapterConfig:
    rank: int
    alpha: Optional[float] = None  # None -> rank, so alpha/rank == 1
    target_projections: Tuple[str, ...] = DEFAULT_TARGETS
    name: str = "adapter"

    def __post_init__(self):
        object.__setattr__(self, "target_projections", tuple(self.target_projections))
        alpha = self.rank if self.alpha is None else self.alpha
        object.__setattr__(self, "alpha", float(alpha))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def validate(self) -> None:
        if self.rank < 1:
            raise RankZero(f"adapter rank must be >= 1, got {self.rank}")
        if not self.target_projections:
            raise InvalidTarget("adapter needs at least one target projection")
        unknown = [t for t in self.target_projections if t not in PROJECTIONS]
        if unknown:
            raise InvalidTarget(f"unknown projections {unknown}; choose from {list(PROJECTIONS)}")
        if len(set(self.target_projections)) != len(self.target_projections):
            raise InvalidTarget("duplicate target projections")


def projection_dims(config: ModelConfig) -> Dict[str, Tuple[int, int]]:
    """(in_dim, out_dim) of every adaptable projection."""
    h, f, kv = config.hidden_size, config.intermediate_size, config.kv_dim
    return {
        "wq": (h, h), "wk": (h, kv), "wv": (h, kv), "wo": (h, h),
        "w_gate": (h, f), "w_up": (h, f), "w_down": (f, h),
    }


@dataclass
class Adapter:
    config: AdapterConfig
    n_layers: int
    dims: Dict[str, Tuple[int, int]]
    A: Dict[Tuple[int, str], np.ndarray] = field(default_factory=dict)  # [rank, in]
    B: Dict[Tuple[int, str], np.ndarray] = field(default_factory=dict)  # [out, rank]

    @property
    def name(self) -> str:
        return self.config.name

    @property
    def scale(self) -> float:
        return self.config.scale

    def keys(self):
        for layer in range(self.n_layers):
            for target in self.config.target_projections:
                yield layer, target

    def delta(self, layer: int, target: str, x: np.ndarray) -> Optional[np.ndarray]:
        """scale · B(A x) for an adapted projection, None otherwise."""
        key = (layer, target)
        if key not in self.A:
            return None
        low = np.matmul(x, self.A[key].T)
        return (np.float32(self.scale) * np.matmul(low, self.B[key].T)).astype(np.float32, copy=False)

    def check_compatible(self, config: ModelConfig) -> None:
        if self.n_layers != config.n_layers:
            raise ShapeMismatch(f"adapter has {self.n_layers} layers, model has {config.n_layers}")
        host = projection_dims(config)
        for target in self.config.target_projections:
            if tuple(self.dims[target]) != host[target]:
                raise ShapeMismatch(
                    f"adapter {target} is {tuple(self.dims[target])}, model expects {host[target]}")

    def payload_bytes(self) -> int:
        return sum(a.size + b.size for a, b in zip(self.A.values(), self.B.values())) * 4


def init_adapter(model_config: ModelConfig, adapter_config: AdapterConfig, seed: int = 0) -> Adapter:
    """A ~ N(0, 0.02), B = 0: attached, the adapter starts as a no-op."""
    adapter_config.validate()
    model_config.validate()
    dims = projection_dims(model_config)
    adapter = Adapter(config=adapter_config, n_layers=model_config.n_layers,
                      dims={t: dims[t] for t in adapter_config.target_projections})
    rng = np.random.default_rng(seed)
    r = adapter_config.rank
    for key in adapter.keys():
        in_dim, out_dim = adapter.dims[key[1]]
        adapter.A[key] = rng.standard_normal((r, in_dim), dtype=np.float32) * np.float32(INIT_SIGMA)
        adapter.B[key] = np.zeros((out_dim, r), dtype=np.float32)
    return adapter


def attach(engine: Engine, adapter: Adapter) -> None:
    engine.attach(adapter)


def detach(engine: Engine, name: str) -> None:
    engine.detach(name)


def adapter_payload_bytes(model_config: ModelConfig, adapter_config: AdapterConfig) -> int:
    """n_layers × Σ_targets (rank·in + out·rank) × 4."""
    dims = projection_dims(model_config)
    per_layer = sum(adapter_config.rank * (dims[t][0] + dims[t][1])
                    for t in adapter_config.target_projections)
    return model_config.n_layers * per_layer * 4


def _header(adapter_config: AdapterConfig, n_layers: int, dims: Dict[str, Tuple[int, int]]) -> bytes:
    return json.dumps({
        "name": adapter_config.name,
        "rank": adapter_config.rank,
        "alpha": adapter_config.alpha,
        "targets": list(adapter_config.target_projections),
        "n_layers": n_layers,
        "dims": {t: list(dims[t]) for t in adapter_config.target_projections},
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")


def adapter_size_bytes(model_config: ModelConfig, adapter_config: AdapterConfig) -> int:
    """Exact UNLA file size: preamble + JSON header + payload."""
    adapter_config.validate()
    header = _header(adapter_config, model_config.n_layers, projection_dims(model_config))
    return _PREAMBLE.size + len(header) + adapter_payload_bytes(model_config, adapter_config)


def encode_adapter(adapter: Adapter) -> bytes:
    header = _header(adapter.config, adapter.n_layers, adapter.dims)
    parts = [_PREAMBLE.pack(ADAPTER_MAGIC, ADAPTER_VERSION, len(header)), header]
    for key in adapter.keys():
        parts.append(np.ascontiguousarray(adapter.A[key], dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(adapter.B[key], dtype="<f4").tobytes())
    return b"".join(parts)


def decode_adapter(buf: bytes, model_config: Optional[ModelConfig] = None) -> Adapter:
    """Parse UNLA bytes; with ``model_config`` the adapter must fit that model."""
    if len(buf) < _PREAMBLE.size:
        raise MalformedFile("adapter file truncated", field="preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(buf)
    if magic != ADAPTER_MAGIC:
        raise MalformedFile("bad magic, not a UNLA adapter", field="magic")
    if version != ADAPTER_VERSION:
        raise UnsupportedVersion(f"UNLA version {version}")
    start = _PREAMBLE.size
    try:
        header = json.loads(buf[start:start + header_len].decode("utf-8"))
        config = AdapterConfig(rank=int(header["rank"]), alpha=float(header["alpha"]),
                               target_projections=tuple(header["targets"]), name=str(header["name"]))
        n_layers = int(header["n_layers"])
        dims = {t: (int(header["dims"][t][0]), int(header["dims"][t][1])) for t in config.target_projections}
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as e:
        raise MalformedFile(f"adapter header invalid ({e})", field="header")
    try:
        config.validate()
    except (RankZero, InvalidTarget) as e:
        raise MalformedFile(e.detail, field="header")

    adapter = Adapter(config=config, n_layers=n_layers, dims=dims)
    if model_config is not None:
        try:
            adapter.check_compatible(model_config)
        except ShapeMismatch as e:
            raise ConfigMismatch(e.detail)

    payload = memoryview(buf)[start + header_len:]
    expected = sum(config.rank * (dims[t][0] + dims[t][1]) for t in config.target_projections) * n_layers * 4
    if len(payload) != expected:
        raise MalformedFile(f"payload holds {len(payload)} bytes, header implies {expected}", field="payload")

    pos = 0
    r = config.rank
    for key in adapter.keys():
        in_dim, out_dim = dims[key[1]]
        for store, shape in ((adapter.A, (r, in_dim)), (adapter.B, (out_dim, r))):
            n = shape[0] * shape[1] * 4
            store[key] = np.frombuffer(payload[pos:pos + n], dtype="<f4").reshape(shape).astype(np.float32)
            pos += n
    return adapter


def save_adapter(adapter: Adapter, path: Path) -> None:
    Path(path).write_bytes(encode_adapter(adapter))
    logger.info("Saved adapter %s (%d payload bytes) to %s", adapter.name, adapter.payload_bytes(), path)


def load_adapter(path: Path, model_config: Optional[ModelConfig] = None) -> Adapter:
    return decode_adapter(Path(path).read_bytes(), model_config)


def adapter_to_base64(adapter: Adapter) -> str:
    return base64.b64encode(encode_adapter(adapter)).decode("ascii")


def with_random_b(adapter: Adapter, seed: int = 1, sigma: float = INIT_SIGMA) -> Adapter:
    """Copy of ``adapter`` whose B matrices are seeded Gaussians (a stand-in for a trained adapter)."""
    rng = np.random.default_rng(seed)
    out = Adapter(config=adapter.config, n_layers=adapter.n_layers, dims=dict(adapter.dims),
                  A=dict(adapter.A))
    for key in adapter.keys():
        out.B[key] = rng.standard_normal(adapter.B[key].shape, dtype=np.float32) * np.float32(sigma)
    return out


def scaled(adapter: Adapter, factor: float) -> Adapter:
    """Same matrices, alpha multiplied by ``factor``."""
    cfg = AdapterConfig(rank=adapter.config.rank, alpha=adapter.config.alpha * factor,
                        target_projections=adapter.config.target_projections, name=adapter.name)
    return Adapter(config=cfg, n_layers=adapter.n_layers, dims=dict(adapter.dims),
                   A=dict(adapter.A), B=dict(adapter.B))


def describe(adapter: Adapter) -> dict:
    return {
        "name": adapter.name,
        "rank": adapter.config.rank,
        "alpha": adapter.config.alpha,
        "targets": list(adapter.config.target_projections),
        "n_layers": adapter.n_layers,
        "payload_bytes": adapter.payload_bytes(),
    }


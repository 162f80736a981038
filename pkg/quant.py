#!/usr/bin/env python3
"""Weight palettization: per-group k-means codebooks at 2 or 4 bits.

A tensor is flattened row-major and cut into groups of ``group_size`` weights
(the last group may be short). Each group stores a 2^bits-entry float32
codebook plus LSB-first bit-packed indices. A mixed-precision plan decides
which groups get 4 bits so the model averages a target bit width.
"""

import io
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import (
    CorruptIndices,
    EmptyGroup,
    InvalidConfig,
    MalformedContainer,
    PlanLengthMismatch,
    ShapeMismatch,
    TargetOutOfRange,
    UnsupportedVersion,
)
from model import Checkpoint, ModelConfig, expected_shapes, is_norm, load_checkpoint


logger = logging.getLogger(__name__)

SUPPORTED_BITS = (2, 4)
DEFAULT_GROUP_SIZE = 64
DEFAULT_TARGET_BITS = 3.5
KMEANS_SEED = 42
KMEANS_MAX_ITER = 50
KMEANS_TOL = 1e-7

TENSOR_MAGIC = b"UNLQ"
CHECKPOINT_MAGIC = b"UNLP"
FORMAT_VERSION = 1


@dataclass
class PalettizedGroup:
    bits: int
    codebook: np.ndarray  # float32, 2**bits entries
    packed: bytes  # LSB-first indices
    length: int


@dataclass
class PalettizedTensor:
    original_shape: Tuple[int, ...]
    group_size: int
    groups: List[PalettizedGroup]

    @property
    def element_count(self) -> int:
        return sum(g.length for g in self.groups)

    @property
    def avg_bits(self) -> float:
        n = self.element_count
        return sum(g.bits * g.length for g in self.groups) / n if n else 0.0

    @property
    def codebook_bits(self) -> int:
        return sum(32 * (1 << g.bits) for g in self.groups)


@dataclass
class MixedPrecisionPlan:
    bits: List[int]
    achieved_avg_bits: float
    target_avg_bits: float

    def __len__(self) -> int:
        return len(self.bits)

    @classmethod
    def uniform(cls, n_groups: int, bits: int) -> "MixedPrecisionPlan":
        return cls(bits=[bits] * n_groups, achieved_avg_bits=float(bits), target_avg_bits=float(bits))


@dataclass
class QuantReport:
    mse: float
    max_abs_err: float
    avg_bits: float
    compression_ratio: float

    def to_dict(self) -> dict:
        return {"mse": self.mse, "max_abs_err": self.max_abs_err,
                "avg_bits": self.avg_bits, "compression_ratio": self.compression_ratio}


# ---------------------------------------------------------------------------
# bit packing


def pack_indices(indices: np.ndarray, bits: int) -> bytes:
    per_byte = 8 // bits
    codes = np.asarray(indices, dtype=np.uint8)
    padded = np.zeros(math.ceil(codes.size / per_byte) * per_byte, dtype=np.uint8)
    padded[:codes.size] = codes
    shifts = (np.arange(per_byte, dtype=np.uint8) * bits)
    packed = np.bitwise_or.reduce(padded.reshape(-1, per_byte) << shifts, axis=1)
    return packed.astype(np.uint8).tobytes()


def unpack_indices(packed: bytes, bits: int, length: int) -> np.ndarray:
    if len(packed) != math.ceil(length * bits / 8):
        raise CorruptIndices(f"{len(packed)} index bytes for {length} codes at {bits} bits")
    per_byte = 8 // bits
    raw = np.frombuffer(packed, dtype=np.uint8)
    shifts = (np.arange(per_byte, dtype=np.uint8) * bits)
    codes = (raw[:, None] >> shifts) & np.uint8((1 << bits) - 1)
    return codes.reshape(-1)[:length]


# ---------------------------------------------------------------------------
# k-means


def _assign(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid for each value (ties -> lower index)."""
    return np.argmin(np.abs(values[:, None] - centroids[None, :]), axis=1)


def _lloyd(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    centroids = centroids.astype(np.float64).copy()
    for _ in range(KMEANS_MAX_ITER):
        labels = _assign(values, centroids)
        sums = np.bincount(labels, weights=values, minlength=centroids.size)
        counts = np.bincount(labels, minlength=centroids.size)
        updated = np.where(counts > 0, sums / np.maximum(counts, 1), centroids)
        movement = np.max(np.abs(updated - centroids))
        centroids = updated
        if movement < KMEANS_TOL:
            break
    return centroids


def _kmeans_pp(values: np.ndarray, k: int, rng: np.random.Generator,
               chosen: Optional[np.ndarray] = None) -> np.ndarray:
    """k-means++ seeding, optionally extending an already chosen set of centroids."""
    centers = list(chosen) if chosen is not None else [values[rng.integers(values.size)]]
    while len(centers) < k:
        d2 = np.min((values[:, None] - np.asarray(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(centers[-1])
            continue
        centers.append(values[rng.choice(values.size, p=d2 / total)])
    return np.asarray(centers, dtype=np.float64)


def _quantile_init(values: np.ndarray, k: int) -> np.ndarray:
    """Means of k equal-mass slices of the sorted values."""
    ordered = np.sort(values)
    return np.asarray([chunk.mean() for chunk in np.array_split(ordered, k)], dtype=np.float64)


def _finalize(values: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    codebook = centroids.astype(np.float32)
    indices = _assign(values, codebook.astype(np.float64))
    mse = float(np.mean((codebook[indices].astype(np.float64) - values) ** 2))
    return codebook, indices.astype(np.uint8), mse


def _palettize_values(values: np.ndarray, bits: int, seed: int) -> Tuple[np.ndarray, np.ndarray, float]:
    k = 1 << bits
    distinct = np.unique(values)
    if distinct.size <= k:
        codebook = np.concatenate([distinct, np.full(k - distinct.size, distinct[-1])])
        return _finalize(values, codebook)

    rng = np.random.default_rng(seed)
    inits = []
    nested = None
    if bits > SUPPORTED_BITS[0]:
        # start from the smaller-codebook solution so more bits never do worse
        nested = _palettize_values(values, bits - 2, seed)
        inits.append(_kmeans_pp(values, k, rng, chosen=nested[0].astype(np.float64)))
    inits.append(_kmeans_pp(values, k, rng))
    inits.append(_quantile_init(values, k))

    best = None
    for init in inits:
        candidate = _finalize(values, _lloyd(values, init))
        if best is None or candidate[2] < best[2]:
            best = candidate

    if nested is not None and best[2] > nested[2]:
        small_book, small_idx, small_mse = nested
        padded = np.concatenate([small_book, np.full(k - small_book.size, small_book[-1], np.float32)])
        best = (padded, small_idx, small_mse)
    return best


def palettize_group(values: Sequence[float], bits: int, seed: int = KMEANS_SEED) -> Tuple[np.ndarray, np.ndarray]:
    """k-means codebook (2^bits centroids) and nearest-centroid indices for one group."""
    if bits not in SUPPORTED_BITS:
        raise InvalidConfig(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    arr = np.asarray(values, dtype=np.float32).astype(np.float64).reshape(-1)
    if arr.size == 0:
        raise EmptyGroup("cannot palettize an empty group")
    if not np.all(np.isfinite(arr)):
        raise InvalidConfig("group holds non-finite values")
    codebook, indices, _ = _palettize_values(arr, bits, seed)
    return codebook, indices


# ---------------------------------------------------------------------------
# planning


def group_sensitivities(t: np.ndarray, group_size: int) -> List[float]:
    """Mean |w| of each row-major group."""
    flat = np.abs(np.asarray(t, dtype=np.float64).reshape(-1))
    return [float(flat[i:i + group_size].mean()) for i in range(0, flat.size, group_size)]


def plan_mixed_precision(group_sensitivities: Sequence[float], target_avg_bits: float,
                         group_lengths: Optional[Sequence[int]] = None) -> MixedPrecisionPlan:
    """Give 4 bits to the round(f*N) most sensitive groups, f = (target - 2) / 2.

    Ties in sensitivity go to the lower group index.
    """
    n = len(group_sensitivities)
    if n == 0:
        raise PlanLengthMismatch("plan needs at least one group")
    if not SUPPORTED_BITS[0] <= target_avg_bits <= SUPPORTED_BITS[-1]:
        raise TargetOutOfRange(f"target {target_avg_bits} outside [2, 4]")
    if group_lengths is not None and len(group_lengths) != n:
        raise PlanLengthMismatch(f"{len(group_lengths)} lengths for {n} groups")

    fraction = (target_avg_bits - 2.0) / 2.0
    n_high = min(n, int(math.floor(fraction * n + 0.5)))
    order = sorted(range(n), key=lambda i: (-group_sensitivities[i], i))
    bits = [2] * n
    for i in order[:n_high]:
        bits[i] = 4

    weights = group_lengths if group_lengths is not None else [1] * n
    achieved = sum(b * w for b, w in zip(bits, weights)) / sum(weights)
    return MixedPrecisionPlan(bits=bits, achieved_avg_bits=achieved, target_avg_bits=target_avg_bits)


# ---------------------------------------------------------------------------
# tensors


def _group_slices(n: int, group_size: int) -> List[Tuple[int, int]]:
    return [(i, min(i + group_size, n)) for i in range(0, n, group_size)]


def palettize_tensor(t: np.ndarray, group_size: int, plan: MixedPrecisionPlan,
                     workers: int = 1, seed: int = KMEANS_SEED) -> PalettizedTensor:
    """Palettize ``t`` group by group; output does not depend on ``workers``."""
    if group_size < 1:
        raise InvalidConfig("group_size must be >= 1")
    arr = np.asarray(t, dtype=np.float32)
    flat = arr.reshape(-1)
    slices = _group_slices(flat.size, group_size)
    if len(plan.bits) != len(slices):
        raise PlanLengthMismatch(f"plan has {len(plan.bits)} groups, tensor has {len(slices)}")
    if group_size < (1 << max(plan.bits, default=2)):
        logger.warning("group_size %d is below the codebook size %d", group_size, 1 << max(plan.bits))

    def work(job):
        (start, stop), bits = job
        codebook, indices = palettize_group(flat[start:stop], bits, seed)
        return PalettizedGroup(bits=bits, codebook=codebook, packed=pack_indices(indices, bits),
                               length=stop - start)

    jobs = list(zip(slices, plan.bits))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            groups = list(pool.map(work, jobs))
    else:
        groups = [work(job) for job in jobs]
    return PalettizedTensor(original_shape=tuple(arr.shape), group_size=group_size, groups=groups)


def depalettize(p: PalettizedTensor) -> np.ndarray:
    """Codebook lookup for every group, reshaped to the original shape."""
    expected = math.prod(p.original_shape)
    if p.element_count != expected:
        raise CorruptIndices(f"groups cover {p.element_count} weights, shape needs {expected}")
    parts = []
    for i, g in enumerate(p.groups):
        if g.bits not in SUPPORTED_BITS or len(g.codebook) != (1 << g.bits):
            raise CorruptIndices(f"group {i}: codebook of {len(g.codebook)} entries at {g.bits} bits")
        codebook = np.asarray(g.codebook, dtype=np.float32)
        if not np.all(np.isfinite(codebook)):
            raise CorruptIndices(f"group {i}: non-finite codebook")
        parts.append(codebook[unpack_indices(g.packed, g.bits, g.length)])
    flat = np.concatenate(parts) if parts else np.zeros(0, np.float32)
    return flat.reshape(p.original_shape)


def quantization_report(original: np.ndarray, p: PalettizedTensor) -> QuantReport:
    original = np.asarray(original, dtype=np.float32)
    if tuple(original.shape) != tuple(p.original_shape):
        raise ShapeMismatch(f"original {tuple(original.shape)} vs palettized {tuple(p.original_shape)}")
    diff = depalettize(p).astype(np.float64) - original.astype(np.float64)
    n = max(original.size, 1)
    overhead = p.codebook_bits / n
    return QuantReport(
        mse=float(np.mean(diff ** 2)) if diff.size else 0.0,
        max_abs_err=float(np.max(np.abs(diff))) if diff.size else 0.0,
        avg_bits=p.avg_bits,
        compression_ratio=32.0 / (p.avg_bits + overhead),
    )


# ---------------------------------------------------------------------------
# UNLQ: one palettized tensor


def palettized_to_bytes(p: PalettizedTensor) -> bytes:
    out = io.BytesIO()
    out.write(TENSOR_MAGIC)
    out.write(struct.pack("<I", FORMAT_VERSION))
    out.write(struct.pack("<I", p.group_size))
    out.write(struct.pack("<B", len(p.original_shape)))
    out.write(struct.pack(f"<{len(p.original_shape)}Q", *p.original_shape))
    out.write(struct.pack("<Q", len(p.groups)))
    for g in p.groups:
        out.write(struct.pack("<B", g.bits))
        out.write(np.asarray(g.codebook, dtype="<f4").tobytes())
        out.write(g.packed)
    return out.getvalue()


def palettized_from_bytes(buf: bytes) -> PalettizedTensor:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise MalformedContainer(f"UNLQ truncated while reading {what}", field=what)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != TENSOR_MAGIC:
        raise MalformedContainer("bad magic, not a UNLQ payload", field="magic")
    version, = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"UNLQ version {version}")
    group_size, = struct.unpack("<I", take(4, "group_size"))
    rank, = struct.unpack("<B", take(1, "rank"))
    shape = struct.unpack(f"<{rank}Q", take(8 * rank, "shape")) if rank else ()
    n_groups, = struct.unpack("<Q", take(8, "group count"))
    total = math.prod(shape)
    if group_size < 1 or n_groups != math.ceil(total / group_size):
        raise MalformedContainer(f"{n_groups} groups of {group_size} cannot cover shape {shape}",
                                 field="group count")

    groups = []
    for i in range(n_groups):
        length = min(group_size, total - i * group_size)
        bits, = struct.unpack("<B", take(1, f"group {i} bits"))
        if bits not in SUPPORTED_BITS:
            raise CorruptIndices(f"group {i}: unsupported bit width {bits}")
        codebook = np.frombuffer(take(4 * (1 << bits), f"group {i} codebook"), dtype="<f4").astype(np.float32)
        packed = take(math.ceil(length * bits / 8), f"group {i} indices")
        groups.append(PalettizedGroup(bits=bits, codebook=codebook, packed=packed, length=length))
    if pos != len(buf):
        raise MalformedContainer(f"{len(buf) - pos} trailing bytes after UNLQ payload", field="trailer")
    return PalettizedTensor(original_shape=tuple(shape), group_size=group_size, groups=groups)


def save_palettized(p: PalettizedTensor, path: Path) -> None:
    Path(path).write_bytes(palettized_to_bytes(p))


def load_palettized(path: Path) -> PalettizedTensor:
    return palettized_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# whole checkpoints


@dataclass
class PalettizedCheckpoint:
    config: ModelConfig
    group_size: int
    target_avg_bits: float
    raw: Dict[str, np.ndarray] = field(default_factory=dict)
    palettized: Dict[str, PalettizedTensor] = field(default_factory=dict)

    @property
    def model_id(self) -> str:
        return self.config.model_id

    @property
    def avg_bits(self) -> float:
        """Mean bits per palettized weight (raw tensors excluded)."""
        n = sum(p.element_count for p in self.palettized.values())
        bits = sum(p.avg_bits * p.element_count for p in self.palettized.values())
        return bits / n if n else 0.0

    @property
    def n_groups(self) -> int:
        return sum(len(p.groups) for p in self.palettized.values())


def palettize_checkpoint(ckpt: Checkpoint, target_avg_bits: float = DEFAULT_TARGET_BITS,
                         group_size: int = DEFAULT_GROUP_SIZE, include_embeddings: bool = False,
                         workers: int = 1) -> PalettizedCheckpoint:
    """Palettize every weight matrix with one model-wide mixed-precision plan.

    Norm vectors (and the embedding table unless ``include_embeddings``) stay float32.
    """
    names = [n for n in expected_shapes(ckpt.config)
             if not is_norm(n) and (include_embeddings or n != "embed.weight")]
    sensitivities: List[float] = []
    lengths: List[int] = []
    spans: Dict[str, Tuple[int, int]] = {}
    for name in names:
        t = ckpt.tensors[name]
        sens = group_sensitivities(t, group_size)
        spans[name] = (len(sensitivities), len(sensitivities) + len(sens))
        sensitivities.extend(sens)
        lengths.extend(stop - start for start, stop in _group_slices(t.size, group_size))

    plan = plan_mixed_precision(sensitivities, target_avg_bits, lengths)
    result = PalettizedCheckpoint(config=ckpt.config, group_size=group_size, target_avg_bits=target_avg_bits)
    for name, t in ckpt.tensors.items():
        if name in spans:
            start, stop = spans[name]
            sub = MixedPrecisionPlan(bits=plan.bits[start:stop], achieved_avg_bits=plan.achieved_avg_bits,
                                     target_avg_bits=target_avg_bits)
            result.palettized[name] = palettize_tensor(t, group_size, sub, workers=workers)
        else:
            result.raw[name] = np.asarray(t, dtype=np.float32)
    logger.info("Palettized %s: %d tensors, %d groups, avg %.3f bits (target %.2f)",
                ckpt.model_id, len(result.palettized), result.n_groups, result.avg_bits, target_avg_bits)
    return result


def depalettize_checkpoint(pc: PalettizedCheckpoint) -> Checkpoint:
    tensors = dict(pc.raw)
    for name, p in pc.palettized.items():
        tensors[name] = depalettize(p)
    ckpt = Checkpoint(config=pc.config, tensors=tensors)
    ckpt.validate()
    return ckpt


def save_palettized_checkpoint(pc: PalettizedCheckpoint, path: Path) -> None:
    """UNLP container: magic, u32 version, u64 header length + JSON header, payloads."""
    entries = []
    payloads = []
    offset = 0
    for name in expected_shapes(pc.config):
        if name in pc.palettized:
            data = palettized_to_bytes(pc.palettized[name])
            kind, shape = "palettized", pc.palettized[name].original_shape
        else:
            arr = np.ascontiguousarray(pc.raw[name], dtype="<f4")
            data = arr.tobytes()
            kind, shape = "raw", arr.shape
        entries.append({"name": name, "kind": kind, "shape": list(shape), "offset": offset, "nbytes": len(data)})
        payloads.append(data)
        offset += len(data)

    header = json.dumps({
        "config": pc.config.to_dict(),
        "group_size": pc.group_size,
        "target_avg_bits": pc.target_avg_bits,
        "tensors": entries,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for data in payloads:
            f.write(data)
    logger.info("Saved palettized checkpoint %s to %s", pc.model_id, path)


def load_palettized_checkpoint(path: Path) -> PalettizedCheckpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise MalformedContainer("bad magic, not a UNLP container", field="magic")
    if len(buf) < 16:
        raise MalformedContainer("UNLP header truncated", field="header")
    version, header_len = struct.unpack("<IQ", buf[4:16])
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"UNLP version {version}")
    data_start = 16 + header_len
    try:
        header = json.loads(buf[16:data_start].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        entries = header["tensors"]
        if not isinstance(entries, list):
            raise TypeError("tensors must be a list")
        pc = PalettizedCheckpoint(config=config, group_size=int(header["group_size"]),
                                  target_avg_bits=float(header["target_avg_bits"]))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise MalformedContainer(f"UNLP header invalid ({e})", field="header")
    except InvalidConfig as e:
        raise MalformedContainer(f"UNLP config rejected: {e.detail}", field="config")

    for entry in entries:
        name = entry.get("name", "?") if isinstance(entry, dict) else "?"
        try:
            if not isinstance(name, str) or entry["kind"] not in ("palettized", "raw"):
                raise ValueError(f"bad name or kind in {entry!r}")
            offset, nbytes, shape = entry["offset"], entry["nbytes"], entry["shape"]
            if not (isinstance(offset, int) and isinstance(nbytes, int) and offset >= 0 and nbytes >= 0):
                raise ValueError("offset and nbytes must be non-negative integers")
            if not (isinstance(shape, list) and all(isinstance(d, int) and d >= 0 for d in shape)):
                raise ValueError("shape must be a list of non-negative integers")
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedContainer(f"UNLP tensor entry invalid ({e})", field=name)
        start = data_start + offset
        blob = buf[start:start + nbytes]
        if len(blob) != nbytes:
            raise MalformedContainer(f"{name} payload truncated", field=name)
        if entry["kind"] == "palettized":
            pc.palettized[name] = palettized_from_bytes(blob)
        else:
            if nbytes != 4 * math.prod(shape):
                raise MalformedContainer(f"{name} payload does not match shape {shape}", field=name)
            pc.raw[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)
    return pc


def open_checkpoint(path: Path) -> Checkpoint:
    """Load a UNLM checkpoint or a UNLP palettized one (depalettized for inference)."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == CHECKPOINT_MAGIC:
        return depalettize_checkpoint(load_palettized_checkpoint(path))
    return load_checkpoint(path)[1]

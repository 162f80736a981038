#!/usr/bin/env python3
"""Decoder-only transformer: config, checkpoints, inference engine.

Recipe per layer (pre-norm residual):
    x += attn(rms_norm(x))      # GQA with RoPE, bias-free projections
    x += ffn(rms_norm(x))       # SwiGLU
then a final rms_norm and logits against the tied embedding table.
"""

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import (
    AlreadyAttached,
    ContextOverflow,
    EmptyPrompt,
    InvalidConfig,
    MalformedContainer,
    NotAttached,
    OddHeadDim,
    SequenceTooShort,
    ShapeViolation,
    ShrinkNotAllowed,
    TokenOutOfRange,
    UnilmError,
    UnsupportedVersion,
)
from kv_cache import KVCache
from nn_core import (
    DEFAULT_ROPE_THETA,
    AttentionGeometry,
    gqa_attention,
    gqa_attention_tiled,
    linear_nobias,
    log_softmax,
    rms_norm,
    rope_tables,
    rotate_pairs,
    silu,
    softmax,
)


logger = logging.getLogger(__name__)

CONTAINER_MAGIC = b"UNLM"
CONTAINER_VERSION = 1
PUBLISHED_TOTAL_PARAMETERS = 422_000_000

ATTN_PROJECTIONS = ("wq", "wk", "wv", "wo")
FFN_PROJECTIONS = ("w_gate", "w_up", "w_down")
PROJECTIONS = ATTN_PROJECTIONS + FFN_PROJECTIONS


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; the embedding table is always tied."""
    vocab_size: int
    hidden_size: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    intermediate_size: int
    max_seq_len: int
    rms_eps: float = 1e-5
    rope_theta: float = DEFAULT_ROPE_THETA
    tied_embeddings: bool = True
    model_id: str = "unnamed"

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    def geometry(self) -> AttentionGeometry:
        return AttentionGeometry(self.n_heads, self.n_kv_heads, self.head_dim, self.rope_theta)

    def validate(self) -> None:
        dims = ("vocab_size", "hidden_size", "n_layers", "n_heads", "n_kv_heads",
                "intermediate_size", "max_seq_len")
        for name in dims:
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise InvalidConfig(f"{name} must be a positive integer, got {value!r}")
        if self.hidden_size % self.n_heads:
            raise InvalidConfig(f"hidden_size {self.hidden_size} not divisible by n_heads {self.n_heads}")
        if self.n_heads % self.n_kv_heads:
            raise InvalidConfig(f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}")
        if self.head_dim % 2:
            raise OddHeadDim(f"head_dim {self.head_dim} must be even")
        if self.rms_eps <= 0 or self.rope_theta <= 0:
            raise InvalidConfig("rms_eps and rope_theta must be positive")
        if not self.tied_embeddings:
            raise InvalidConfig("only tied input/output embeddings are supported")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        if not isinstance(data, dict):
            raise InvalidConfig("model config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys {sorted(unknown)}")
        try:
            config = cls(**data)
            config.validate()
        except TypeError as e:
            raise InvalidConfig(str(e))
        return config

    @classmethod
    def preset(cls, name: str) -> "ModelConfig":
        try:
            return PRESETS[name]
        except KeyError:
            raise InvalidConfig(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")


PRESETS: Dict[str, ModelConfig] = {
    "toy": ModelConfig(vocab_size=256, hidden_size=64, n_layers=2, n_heads=4, n_kv_heads=2,
                       intermediate_size=176, max_seq_len=128, model_id="toy"),
    "slim34m": ModelConfig(vocab_size=61788, hidden_size=2048, n_layers=8, n_heads=32, n_kv_heads=8,
                           intermediate_size=5632, max_seq_len=2048, model_id="slim-34m"),
    # server-side model: same recipe at a larger declared config
    "manyak": ModelConfig(vocab_size=61788, hidden_size=2048, n_layers=24, n_heads=16, n_kv_heads=8,
                          intermediate_size=5632, max_seq_len=2048, model_id="manyak-1.3b"),
}


def expected_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every tensor name a checkpoint must hold, with its shape, in container order."""
    h, f = config.hidden_size, config.intermediate_size
    shapes: Dict[str, Tuple[int, ...]] = {"embed.weight": (config.vocab_size, h)}
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn.wq"] = (h, h)
        shapes[f"{p}.attn.wk"] = (config.kv_dim, h)
        shapes[f"{p}.attn.wv"] = (config.kv_dim, h)
        shapes[f"{p}.attn.wo"] = (h, h)
        shapes[f"{p}.attn_norm"] = (h,)
        shapes[f"{p}.ffn.w_gate"] = (f, h)
        shapes[f"{p}.ffn.w_up"] = (f, h)
        shapes[f"{p}.ffn.w_down"] = (h, f)
        shapes[f"{p}.ffn_norm"] = (h,)
    shapes["final_norm"] = (h,)
    return shapes


def projection_name(layer: int, target: str) -> str:
    group = "attn" if target in ATTN_PROJECTIONS else "ffn"
    return f"layers.{layer}.{group}.{target}"


def is_norm(name: str) -> bool:
    return name.endswith("_norm")


def _closed_form(vocab: int, h: int, layers: int, kv_dim: int, f: int) -> int:
    per_layer = h * h + 2 * h * kv_dim + h * h + 3 * h * f + 2 * h
    return vocab * h + layers * per_layer + h


def count_parameters(config: ModelConfig) -> int:
    """Closed-form parameter count; the tied embedding is counted once."""
    config.validate()
    return _closed_form(config.vocab_size, config.hidden_size, config.n_layers,
                        config.kv_dim, config.intermediate_size)


def published_count_discrepancy(config: Optional[ModelConfig] = None) -> dict:
    """Closed form for the on-device preset against the published 0.422B total.

    Sweeps the kv-head count over 1..n_heads; none of them reproduces the figure.
    """
    config = config or PRESETS["slim34m"]
    sweep = {
        kv: _closed_form(config.vocab_size, config.hidden_size, config.n_layers,
                         kv * config.head_dim, config.intermediate_size)
        for kv in range(1, config.n_heads + 1)
    }
    return {
        "model_id": config.model_id,
        "n_kv_heads": config.n_kv_heads,
        "closed_form": count_parameters(config),
        "published_total": PUBLISHED_TOTAL_PARAMETERS,
        "sweep": sweep,
        "any_match": PUBLISHED_TOTAL_PARAMETERS in sweep.values(),
    }


@dataclass
class Checkpoint:
    """Config plus named float32 tensors. Tensors are read-only once built."""
    config: ModelConfig
    tensors: Dict[str, np.ndarray]

    def __post_init__(self):
        for arr in self.tensors.values():
            arr.flags.writeable = False

    @property
    def model_id(self) -> str:
        return self.config.model_id

    def validate(self) -> None:
        shapes = expected_shapes(self.config)
        for name, shape in shapes.items():
            arr = self.tensors.get(name)
            if arr is None:
                raise ShapeViolation(f"missing tensor {name}", field=name)
            if tuple(arr.shape) != shape:
                raise ShapeViolation(f"{name}: expected {shape}, found {tuple(arr.shape)}", field=name)
        extra = sorted(set(self.tensors) - set(shapes))
        if extra:
            raise ShapeViolation(f"unexpected tensors {extra}", field=extra[0])

    def num_parameters(self) -> int:
        return sum(int(a.size) for a in self.tensors.values())

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.tensors):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.tensors[name], dtype="<f4").tobytes())
        return digest.hexdigest()


def init_checkpoint(config: ModelConfig, seed: int = 0, sigma: float = 0.02) -> Checkpoint:
    """Seeded Gaussian weights (norm vectors start at ones)."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if is_norm(name):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = rng.standard_normal(shape, dtype=np.float32) * np.float32(sigma)
    logger.info("Initialized %s checkpoint (seed=%d, %d parameters)",
                config.model_id, seed, count_parameters(config))
    return Checkpoint(config=config, tensors=tensors)


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise MalformedContainer(f"truncated while reading {what}", field=what)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt), what))
        return values if len(values) > 1 else values[0]


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    """Write the UNLM container (little-endian, offsets relative to the data section)."""
    config_bytes = json.dumps(ckpt.config.to_dict(), sort_keys=True).encode("utf-8")
    index = []
    payloads = []
    offset = 0
    for name in expected_shapes(ckpt.config):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        name_bytes = name.encode("utf-8")
        entry = struct.pack("<H", len(name_bytes)) + name_bytes
        entry += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        entry += struct.pack("<Q", offset)
        index.append(entry)
        data = arr.tobytes()
        payloads.append(data)
        offset += len(data)

    with open(path, "wb") as f:
        f.write(CONTAINER_MAGIC)
        f.write(struct.pack("<I", CONTAINER_VERSION))
        f.write(struct.pack("<Q", len(config_bytes)))
        f.write(config_bytes)
        f.write(struct.pack("<I", len(index)))
        for entry in index:
            f.write(entry)
        for data in payloads:
            f.write(data)
    logger.info("Saved checkpoint %s (%d tensors) to %s", ckpt.model_id, len(index), path)


def read_checkpoint_bytes(buf: bytes) -> Checkpoint:
    reader = _Reader(buf)
    if reader.take(4, "magic") != CONTAINER_MAGIC:
        raise MalformedContainer("bad magic, not a UNLM container", field="magic")
    version = reader.unpack("<I", "version")
    if version != CONTAINER_VERSION:
        raise UnsupportedVersion(f"UNLM version {version} (supported: {CONTAINER_VERSION})")

    config_len = reader.unpack("<Q", "config length")
    try:
        config_data = json.loads(reader.take(config_len, "config").decode("utf-8"))
        config = ModelConfig.from_dict(config_data)
    except (UnicodeDecodeError, json.JSONDecodeError, AttributeError) as e:
        raise MalformedContainer(f"config header is not valid JSON ({e})", field="config")
    except InvalidConfig as e:
        raise MalformedContainer(f"config header rejected: {e.detail}", field="config")

    count = reader.unpack("<I", "tensor count")
    entries = []
    for _ in range(count):
        name_len = reader.unpack("<H", "name length")
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedContainer("tensor name is not UTF-8", field="name")
        rank = reader.unpack("<B", "rank")
        dims = struct.unpack(f"<{rank}Q", reader.take(8 * rank, f"{name} dims")) if rank else ()
        offset = reader.unpack("<Q", f"{name} offset")
        entries.append((name, tuple(dims), offset))

    data_start = reader.pos
    data_len = len(buf) - data_start
    tensors = {}
    for name, dims, offset in entries:
        if name in tensors:
            raise MalformedContainer(f"duplicate tensor {name}", field=name)
        count_elems = math.prod(dims)
        if offset + 4 * count_elems > data_len:
            raise MalformedContainer(f"{name} payload runs past end of file", field=name)
        arr = np.frombuffer(buf, dtype="<f4", count=count_elems, offset=data_start + offset)
        tensors[name] = arr.reshape(dims)

    ckpt = Checkpoint(config=config, tensors=tensors)
    ckpt.validate()
    return ckpt


def load_checkpoint(path: Path) -> Tuple[ModelConfig, Checkpoint]:
    with open(path, "rb") as f:
        buf = f.read()
    ckpt = read_checkpoint_bytes(buf)
    logger.info("Loaded checkpoint %s from %s", ckpt.model_id, path)
    return ckpt.config, ckpt


def extend_embeddings(ckpt: Checkpoint, new_vocab_size: int, init_policy: str = "mean",
                      sigma: float = 0.02, seed: int = 0) -> Checkpoint:
    """Grow the (tied) embedding table; old rows and every other tensor are untouched.

    init_policy: "mean" (arithmetic mean of old rows) or "gaussian" (seeded, std ``sigma``).
    """
    old_vocab = ckpt.config.vocab_size
    if new_vocab_size < old_vocab:
        raise ShrinkNotAllowed(f"cannot shrink vocab {old_vocab} -> {new_vocab_size}")
    if new_vocab_size == old_vocab:
        return ckpt

    embed = ckpt.tensors["embed.weight"]
    extra = new_vocab_size - old_vocab
    if init_policy == "mean":
        row = embed.astype(np.float64).mean(axis=0).astype(np.float32)
        new_rows = np.tile(row, (extra, 1))
    elif init_policy == "gaussian":
        rng = np.random.default_rng(seed)
        new_rows = rng.standard_normal((extra, embed.shape[1]), dtype=np.float32) * np.float32(sigma)
    else:
        raise InvalidConfig(f"unknown init policy {init_policy!r}")

    tensors = dict(ckpt.tensors)
    tensors["embed.weight"] = np.concatenate([embed, new_rows], axis=0)
    config = replace(ckpt.config, vocab_size=new_vocab_size)
    logger.info("Extended embeddings %d -> %d (%s)", old_vocab, new_vocab_size, init_policy)
    extended = Checkpoint(config=config, tensors=tensors)
    extended.validate()
    return extended


@dataclass
class GenerationParams:
    """Decoding policy. temperature 0 means greedy; top_k None means unlimited."""
    max_new_tokens: int = 32
    temperature: float = 0.0
    top_k: Optional[int] = None
    seed: int = 0
    stop_ids: List[int] = field(default_factory=list)

    def validate(self) -> None:
        if self.max_new_tokens < 0:
            raise InvalidConfig("max_new_tokens must be >= 0")
        if self.temperature < 0:
            raise InvalidConfig("temperature must be >= 0")
        if self.top_k is not None and self.top_k < 1:
            raise InvalidConfig("top_k must be >= 1 or unlimited")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GenerationParams":
        """Build from a JSON body. ``top_k`` of 0 or null means unlimited, as on the CLI."""
        top_k = data.get("top_k")
        params = cls(
            max_new_tokens=int(data.get("max_new_tokens", cls.max_new_tokens)),
            temperature=float(data.get("temperature", cls.temperature)),
            top_k=None if top_k in (None, 0) else int(top_k),
            seed=int(data.get("seed", cls.seed)),
            stop_ids=[int(t) for t in data.get("stop_ids") or []],
        )
        params.validate()
        return params


def select_token(logits: np.ndarray, params: GenerationParams, rng: np.random.Generator) -> int:
    """Argmax (ties -> lowest id) at temperature 0, else top-k temperature sampling."""
    if params.temperature == 0:
        return int(np.argmax(logits))
    z = np.asarray(logits, dtype=np.float64) / params.temperature
    if params.top_k is not None and params.top_k < z.size:
        keep = np.argsort(-z, kind="stable")[:params.top_k]
    else:
        keep = np.arange(z.size)
    probs = softmax(z[keep])
    return int(keep[rng.choice(keep.size, p=probs)])


def perplexity_from_logits(logits: np.ndarray, ids: Sequence[int]) -> float:
    """exp of mean negative log-likelihood of ids[1:] under logits[:-1]."""
    if len(ids) < 2:
        raise SequenceTooShort("perplexity needs at least 2 tokens")
    lp = log_softmax(np.asarray(logits[:len(ids) - 1], dtype=np.float64), axis=-1)
    targets = np.asarray(ids[1:])
    nll = -lp[np.arange(targets.size), targets].mean()
    return float(np.exp(nll))


class Engine:
    """Inference session factory over an immutable checkpoint.

    At most one adapter is attached at a time; it contributes additive
    low-rank deltas to projection outputs and never touches base weights.
    """

    def __init__(self, checkpoint: Checkpoint, use_tiled_attention: bool = False):
        checkpoint.config.validate()
        self.checkpoint = checkpoint
        self.config = checkpoint.config
        self.adapter = None
        self._attend = gqa_attention_tiled if use_tiled_attention else gqa_attention

    @property
    def model_id(self) -> str:
        return self.config.model_id

    def attach(self, adapter) -> None:
        if self.adapter is not None:
            raise AlreadyAttached(f"adapter {self.adapter.name!r} already attached")
        adapter.check_compatible(self.config)
        self.adapter = adapter
        logger.info("Attached adapter %s to %s", adapter.name, self.model_id)

    def detach(self, name: str) -> None:
        if self.adapter is None or self.adapter.name != name:
            raise NotAttached(f"adapter {name!r} is not attached")
        self.adapter = None
        logger.info("Detached adapter %s from %s", name, self.model_id)

    def new_cache(self) -> KVCache:
        c = self.config
        return KVCache(c.n_layers, c.max_seq_len, c.n_kv_heads, c.head_dim)

    def _project(self, x: np.ndarray, layer: int, target: str) -> np.ndarray:
        y = linear_nobias(x, self.checkpoint.tensors[projection_name(layer, target)])
        if self.adapter is not None:
            delta = self.adapter.delta(layer, target, x)
            if delta is not None:
                y = y + delta
        return y

    def forward(self, tokens: Sequence[int], cache: Optional[KVCache] = None) -> np.ndarray:
        """Logits [T, vocab] for ``tokens`` appended after the cache contents."""
        c = self.config
        cache = cache if cache is not None else self.new_cache()
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        T = ids.size
        if T and (ids.min() < 0 or ids.max() >= c.vocab_size):
            raise TokenOutOfRange(f"token ids must be in [0, {c.vocab_size})")
        if cache.cur_len + T > c.max_seq_len:
            raise ContextOverflow(f"{cache.cur_len} cached + {T} new > max_seq_len {c.max_seq_len}")
        if T == 0:
            return np.zeros((0, c.vocab_size), dtype=np.float32)

        t = self.checkpoint.tensors
        embed = t["embed.weight"]
        x = embed[ids]
        start = cache.cur_len
        cos, sin = rope_tables(range(start, start + T), c.head_dim, c.rope_theta)

        for i in range(c.n_layers):
            h = rms_norm(x, t[f"layers.{i}.attn_norm"], c.rms_eps)
            q = self._project(h, i, "wq").reshape(T, c.n_heads, c.head_dim)
            k = self._project(h, i, "wk").reshape(T, c.n_kv_heads, c.head_dim)
            v = self._project(h, i, "wv").reshape(T, c.n_kv_heads, c.head_dim)
            q = rotate_pairs(q, cos, sin)
            k = rotate_pairs(k, cos, sin)
            keys, values = cache.write(i, k, v)
            attn = self._attend(q, keys, values, causal=True)
            x = x + self._project(attn.reshape(T, c.hidden_size), i, "wo")

            h = rms_norm(x, t[f"layers.{i}.ffn_norm"], c.rms_eps)
            hidden = silu(self._project(h, i, "w_gate")) * self._project(h, i, "w_up")
            x = x + self._project(hidden, i, "w_down")

        cache.advance(T)
        x = rms_norm(x, t["final_norm"], c.rms_eps)
        return linear_nobias(x, embed)

    def generate(self, prompt_ids: Sequence[int], params: GenerationParams) -> List[int]:
        params.validate()
        prompt = [int(t) for t in prompt_ids]
        if not prompt:
            raise EmptyPrompt("prompt must hold at least one token")
        if len(prompt) + params.max_new_tokens > self.config.max_seq_len:
            raise ContextOverflow(
                f"prompt {len(prompt)} + max_new_tokens {params.max_new_tokens} > {self.config.max_seq_len}")
        if params.max_new_tokens == 0:
            return []

        rng = np.random.default_rng(params.seed)
        stop = set(params.stop_ids)
        cache = self.new_cache()
        logits = self.forward(prompt, cache)[-1]
        out: List[int] = []
        while True:
            token = select_token(logits, params, rng)
            out.append(token)
            if token in stop or len(out) >= params.max_new_tokens:
                break
            logits = self.forward([token], cache)[-1]
        return out

    def perplexity(self, ids: Sequence[int]) -> float:
        if len(ids) < 2:
            raise SequenceTooShort("perplexity needs at least 2 tokens")
        return perplexity_from_logits(self.forward(ids), ids)


def forward(ckpt: Checkpoint, tokens: Sequence[int], cache: Optional[KVCache] = None) -> np.ndarray:
    return Engine(ckpt).forward(tokens, cache)


def generate(ckpt: Checkpoint, prompt_ids: Sequence[int], params: GenerationParams) -> List[int]:
    return Engine(ckpt).generate(prompt_ids, params)


def perplexity(ckpt: Checkpoint, ids: Sequence[int]) -> float:
    return Engine(ckpt).perplexity(ids)


def rank_by_perplexity(engine: Engine, tokenizer, candidates: Sequence[str]) -> List[Tuple[str, float]]:
    """Score candidate texts and sort them best (lowest perplexity) first.

    Candidates that cannot be scored (too short or too long) are logged and skipped.
    """
    scored = []
    for text in candidates:
        try:
            scored.append((text, engine.perplexity(tokenizer.encode(text))))
        except UnilmError as e:
            logger.warning("Skipping candidate %r: %s", text[:40], e.detail)
    scored.sort(key=lambda pair: pair[1])
    return scored

"""A small deterministic decoder-only transformer with explicit positions.

Every token carries its own position index (rotary encoding is applied per
token), and attention is restricted by an arbitrary boolean mask.  That is all
the machinery needed to run agent-batch and slot-interleaved layouts, where
cache insertion order and position order disagree.

Everything is float32 numpy; parameters are frozen after init.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .scheduler import AttentionMask, TokenCoordinate

DTYPE = np.float32
_NORM_EPS = 1e-6


class VisibilityError(ValueError):
    """A mask or visible set is inconsistent with the tokens it covers."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 4
    head_dim: int | None = 8
    vocab_size: int = 259
    rotary_base: float = 10000.0
    seed: int = 0
    width: int | None = None
    mlp_ratio: int = 4
    context_length: int = 8192

    def __post_init__(self) -> None:
        if self.num_heads < 1 or self.num_layers < 1 or self.vocab_size < 1 or self.mlp_ratio < 1:
            raise ValueError("num_layers, num_heads, vocab_size and mlp_ratio must be >= 1")
        head_dim = self.head_dim
        if head_dim is None:
            if self.width is None:
                raise ValueError("either head_dim or width is required")
            if self.width % self.num_heads:
                raise ValueError(f"width {self.width} is not divisible by num_heads {self.num_heads}")
            head_dim = self.width // self.num_heads
            object.__setattr__(self, "head_dim", head_dim)
        if head_dim < 1:
            raise ValueError("head_dim must be >= 1")
        if self.width is None:
            object.__setattr__(self, "width", self.num_heads * head_dim)
        elif self.width != self.num_heads * head_dim:
            raise ValueError(
                f"num_heads * head_dim = {self.num_heads * head_dim} does not match width {self.width}"
            )
        if head_dim % 2:
            raise ValueError(f"rotary encoding needs an even head_dim, got {head_dim}")
        if not self.rotary_base > 0:
            raise ValueError("rotary_base must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


class Model:
    """Frozen parameters plus the config they were drawn from."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = {}
        for name, shape in _param_shapes(config):
            value = np.ascontiguousarray(params[name], dtype=DTYPE)
            if value.shape != shape:
                raise ValueError(f"parameter {name} has shape {value.shape}, expected {shape}")
            value.flags.writeable = False
            self.params[name] = value

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, value in self.params.items():
            digest.update(name.encode())
            digest.update(value.astype("<f4").tobytes())
        return digest.hexdigest()

    def layer(self, i: int) -> dict[str, np.ndarray]:
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, v, f = cfg.width, cfg.vocab_size, cfg.width * cfg.mlp_ratio
    shapes = [("embed", (v, d))]
    for i in range(cfg.num_layers):
        shapes += [
            (f"layers.{i}.attn_norm", (d,)),
            (f"layers.{i}.wq", (d, d)),
            (f"layers.{i}.wk", (d, d)),
            (f"layers.{i}.wv", (d, d)),
            (f"layers.{i}.wo", (d, d)),
            (f"layers.{i}.mlp_norm", (d,)),
            (f"layers.{i}.w_up", (d, f)),
            (f"layers.{i}.w_down", (f, d)),
        ]
    shapes += [("final_norm", (d,)), ("unembed", (d, v))]
    return shapes


def init_model(config: ModelConfig) -> Model:
    rng = np.random.Generator(np.random.PCG64(config.seed))
    residual_scale = 1.0 / np.sqrt(2.0 * config.num_layers)
    params = {}
    for name, shape in _param_shapes(config):
        if name.endswith("norm"):
            params[name] = np.ones(shape, dtype=DTYPE)
            continue
        std = 1.0 if name == "embed" else 1.0 / np.sqrt(shape[0])
        if name.endswith(("wo", "w_down")):
            std *= residual_scale
        params[name] = rng.standard_normal(shape, dtype=np.float64).astype(DTYPE) * DTYPE(std)
    return Model(config, params)


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Write ``<u64 header length><JSON header><little-endian float32 data>``."""
    header = {
        "config": asdict(model.config),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for value in model.params.values():
            fh.write(value.astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (size,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + size])
    config = ModelConfig(**header["config"])
    offset = 8 + size
    params = {}
    for tensor in header["tensors"]:
        shape = tuple(tensor["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        chunk = raw[offset : offset + 4 * count]
        if len(chunk) != 4 * count:
            raise ValueError(f"{path}: data ends inside tensor {tensor['name']}")
        params[tensor["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(DTYPE)
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after last tensor")
    return Model(config, params)


# -- building blocks -------------------------------------------------------


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + DTYPE(_NORM_EPS))
    return x / scale * gain


def _gelu(x: np.ndarray) -> np.ndarray:
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(DTYPE(0.7978845608) * (x + DTYPE(0.044715) * x * x * x)))


def rotary(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    """Rotate consecutive channel pairs of ``x`` ([T, H, D]) by position-dependent angles."""
    half = x.shape[-1] // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / x.shape[-1])
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles).astype(DTYPE)[:, None, :]
    sin = np.sin(angles).astype(DTYPE)[:, None, :]
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _project_qkv(model: Model, layer: dict, x: np.ndarray, positions: np.ndarray):
    cfg = model.config
    h = _rms_norm(x, layer["attn_norm"])
    shape = (x.shape[0], cfg.num_heads, cfg.head_dim)
    q = rotary((h @ layer["wq"]).reshape(shape), positions, cfg.rotary_base)
    k = rotary((h @ layer["wk"]).reshape(shape), positions, cfg.rotary_base)
    v = (h @ layer["wv"]).reshape(shape)
    return q, k, v


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    # q [n, H, D]; k, v [T, H, D]; allowed [n, T]
    scores = np.einsum("nhd,thd->hnt", q, k) * DTYPE(1.0 / np.sqrt(q.shape[-1]))
    scores = np.where(allowed[None, :, :], scores, DTYPE(-np.inf))
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    return np.einsum("hnt,thd->nhd", weights, v)


def _finish_block(model: Model, layer: dict, x: np.ndarray, attn: np.ndarray) -> np.ndarray:
    x = x + attn.reshape(x.shape[0], -1) @ layer["wo"]
    h = _rms_norm(x, layer["mlp_norm"])
    return x + _gelu(h @ layer["w_up"]) @ layer["w_down"]


def _logits(model: Model, x: np.ndarray) -> np.ndarray:
    return _rms_norm(x, model.params["final_norm"]) @ model.params["unembed"]


def _check_tokens(model: Model, tokens: Sequence[int], positions: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    pos = np.asarray(positions, dtype=np.int64).reshape(-1)
    if ids.shape != pos.shape:
        raise ValueError(f"{ids.size} tokens but {pos.size} positions")
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        raise ValueError(f"token ids must lie in 0..{model.config.vocab_size - 1}")
    if pos.size and (pos.min() < 0 or pos.max() > model.config.context_length):
        raise ValueError(f"positions must lie in 0..{model.config.context_length}")
    return ids, pos


# -- dense forward ---------------------------------------------------------


def forward_full(
    model: Model,
    tokens: Sequence[int],
    positions: Sequence[int],
    mask: AttentionMask | np.ndarray,
) -> np.ndarray:
    """Logits ``[T, vocab]`` for every token, attention limited to ``mask``.

    ``mask[i, j]`` allows token ``i`` to attend to token ``j``; row ``i`` must
    allow token ``i`` itself.
    """
    ids, pos = _check_tokens(model, tokens, positions)
    allowed = np.asarray(mask.matrix if isinstance(mask, AttentionMask) else mask, dtype=bool)
    n = ids.size
    if allowed.shape != (n, n):
        raise ValueError(f"mask shape {allowed.shape} does not match {n} tokens")
    if n and not allowed[np.arange(n), np.arange(n)].all():
        bad = int(np.flatnonzero(~allowed[np.arange(n), np.arange(n)])[0])
        raise VisibilityError(f"row {bad} does not allow the token to see itself")
    x = model.params["embed"][ids]
    for i in range(model.config.num_layers):
        layer = model.layer(i)
        q, k, v = _project_qkv(model, layer, x, pos)
        x = _finish_block(model, layer, x, _attend(q, k, v, allowed))
    return _logits(model, x)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


# -- incremental forward over a KV cache -----------------------------------


class NewToken(NamedTuple):
    token: int
    position: int
    coord: TokenCoordinate


class KVCache:
    """Append-only store of (coordinate, position, rotated key, value) entries.

    Entries keep insertion order; nothing requires them to be sorted by
    position.  :meth:`extend` returns a new cache and leaves this one intact.
    """

    def __init__(self, num_layers: int, num_heads: int, head_dim: int):
        self.num_layers = num_layers
        self.coords: tuple[TokenCoordinate, ...] = ()
        self.positions: tuple[int, ...] = ()
        empty = np.zeros((0, num_heads, head_dim), dtype=DTYPE)
        self.keys: tuple[np.ndarray, ...] = (empty,) * num_layers
        self.values: tuple[np.ndarray, ...] = (empty,) * num_layers
        self._index: dict[TokenCoordinate, int] = {}

    @classmethod
    def for_model(cls, model: Model) -> KVCache:
        cfg = model.config
        return cls(cfg.num_layers, cfg.num_heads, cfg.head_dim)

    def __len__(self) -> int:
        return len(self.coords)

    def __contains__(self, coord: object) -> bool:
        return coord in self._index

    def index(self, coord: TokenCoordinate) -> int:
        return self._index[coord]

    def extend(self, coords, positions, keys, values) -> KVCache:
        out = object.__new__(KVCache)
        out.num_layers = self.num_layers
        out.coords = self.coords + tuple(coords)
        out.positions = self.positions + tuple(int(p) for p in positions)
        out.keys = tuple(_frozen(np.concatenate([a, b])) for a, b in zip(self.keys, keys))
        out.values = tuple(_frozen(np.concatenate([a, b])) for a, b in zip(self.values, values))
        out._index = dict(self._index)
        for i, c in enumerate(coords, start=len(self.coords)):
            out._index[c] = i
        return out


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def forward_incremental(
    model: Model,
    cache: KVCache,
    new: Sequence[NewToken],
    visible: Sequence[Iterable[TokenCoordinate]],
) -> tuple[np.ndarray, KVCache]:
    """Process ``new`` tokens against ``cache``; return their logits and the extended cache.

    ``visible[i]`` names the coordinates token ``i`` may attend to, drawn from
    the cache or from this call's new tokens (a token always sees itself).
    New tokens in one call are computed jointly, so they may see each other
    in both directions.
    """
    new = [NewToken(*t) for t in new]
    if len(visible) != len(new):
        raise ValueError(f"{len(new)} new tokens but {len(visible)} visible sets")
    if not new:
        return np.zeros((0, model.config.vocab_size), dtype=DTYPE), cache
    ids, pos = _check_tokens(model, [t.token for t in new], [t.position for t in new])

    new_index = {}
    for i, t in enumerate(new):
        if t.coord in cache or t.coord in new_index:
            raise VisibilityError(f"{t.coord} is already present")
        new_index[t.coord] = len(cache) + i
    total = len(cache) + len(new)
    allowed = np.zeros((len(new), total), dtype=bool)
    for i, (t, vis) in enumerate(zip(new, visible)):
        allowed[i, new_index[t.coord]] = True
        for c in vis:
            j = cache._index.get(c)
            if j is None:
                j = new_index.get(c)
            if j is None:
                raise VisibilityError(f"{t.coord} references {c}, which is neither cached nor new")
            allowed[i, j] = True

    x = model.params["embed"][ids]
    new_keys, new_values = [], []
    for i in range(model.config.num_layers):
        layer = model.layer(i)
        q, k, v = _project_qkv(model, layer, x, pos)
        keys = np.concatenate([cache.keys[i], k])
        values = np.concatenate([cache.values[i], v])
        x = _finish_block(model, layer, x, _attend(q, keys, values, allowed))
        new_keys.append(k)
        new_values.append(v)
    extended = cache.extend([t.coord for t in new], pos, new_keys, new_values)
    return _logits(model, x), extended


def max_relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """Largest absolute deviation scaled by the largest reference magnitude."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ValueError(f"shape mismatch {actual.shape} vs {expected.shape}")
    if expected.size == 0:
        return 0.0
    scale = max(float(np.abs(expected).max()), np.finfo(np.float32).tiny)
    return float(np.abs(actual - expected).max() / scale)

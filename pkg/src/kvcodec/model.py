"""Model geometry, per-layer cache containers, rotary embedding, and attention.

Everything downstream (scoring, eviction, codebooks, the simulator) works in
terms of the types defined here.  Caches hold pre-rotation keys; attention
applies the rotary embedding to queries and keys at their stored positions,
so retained tokens keep their original absolute positions throughout.

All arithmetic is float64; storage widths in ``ModelConfig`` only affect
bit accounting, never computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = [
    "ModelConfig",
    "HeadCache",
    "LayerCache",
    "AttentionScores",
    "apply_rope",
    "rope_rows",
    "attention_weights",
]


@dataclass(frozen=True)
class ModelConfig:
    """Head layout and storage widths of the model a cache came from.

    ``value_dtype_bits`` and ``index_bits`` describe how wide cached scalars
    and indices are *accounted* as; they do not change any computation.
    """

    hidden_dim: int
    head_dim: int
    num_q_heads: int
    num_kv_heads: int
    heads_per_group: int
    num_layers: int
    rope_base: float = 10000.0
    value_dtype_bits: int = 16
    index_bits: int = 32

    def __post_init__(self) -> None:
        for name in ("hidden_dim", "head_dim", "num_q_heads", "num_kv_heads",
                     "heads_per_group", "num_layers", "value_dtype_bits", "index_bits"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.rope_base <= 0:
            raise ConfigError(f"rope_base must be positive, got {self.rope_base}")
        if self.num_q_heads != self.num_kv_heads * self.heads_per_group:
            raise ConfigError(
                f"num_q_heads ({self.num_q_heads}) != num_kv_heads ({self.num_kv_heads})"
                f" * heads_per_group ({self.heads_per_group})")
        if self.hidden_dim != self.num_q_heads * self.head_dim:
            raise ConfigError(
                f"hidden_dim ({self.hidden_dim}) != num_q_heads ({self.num_q_heads})"
                f" * head_dim ({self.head_dim})")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary pairing, got {self.head_dim}")


@dataclass(frozen=True)
class HeadCache:
    """Cached tokens of one attention head: positions, pre-rotation keys, values.

    Positions are original sequence indices and stay strictly increasing,
    including after eviction.
    """

    positions: np.ndarray
    keys_pre_rope: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.int64))
        object.__setattr__(self, "keys_pre_rope", np.asarray(self.keys_pre_rope, dtype=np.float64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        n = len(self.positions)
        if self.keys_pre_rope.shape[0] != n or self.values.shape[0] != n:
            raise ConfigError(
                f"head cache length mismatch: {n} positions, "
                f"{self.keys_pre_rope.shape[0]} keys, {self.values.shape[0]} values")
        if n and self.positions.min() < 0:
            raise ConfigError("positions must be non-negative")
        if n > 1 and not np.all(np.diff(self.positions) > 0):
            raise ConfigError("positions must be strictly increasing")
        if self.keys_pre_rope.ndim != 2 or self.values.ndim != 2:
            raise ConfigError("keys and values must be 2-D [token][dim] arrays")
        if self.keys_pre_rope.shape[1] != self.values.shape[1]:
            raise ConfigError("key and value vectors must share one head dimension")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class LayerCache:
    """All heads of one layer.  ``is_unfolded`` marks a GQA cache whose KV
    heads have been repeated out to one per query head."""

    layer_index: int
    heads: tuple[HeadCache, ...]
    is_unfolded: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "heads", tuple(self.heads))
        if self.layer_index < 0:
            raise ConfigError(f"layer_index must be non-negative, got {self.layer_index}")
        if not self.heads:
            raise ConfigError("layer must contain at least one head")
        dims = {h.keys_pre_rope.shape[1] for h in self.heads}
        if len(dims) != 1:
            raise ConfigError(f"heads disagree on head dimension: {sorted(dims)}")

    @property
    def head_dim(self) -> int:
        return self.heads[0].keys_pre_rope.shape[1]

    def token_count(self) -> int:
        """Token count shared by all heads; raises if heads disagree."""
        counts = {len(h) for h in self.heads}
        if len(counts) != 1:
            raise ConfigError(f"heads disagree on token count: {sorted(counts)}")
        return counts.pop()


@dataclass(frozen=True)
class AttentionScores:
    """Masked, row-softmaxed attention matrices for one or more heads.

    Each matrix has one row per query and one column per cached token; the
    last ``window_len`` rows are the observation window.  Rows are
    row-stochastic; causally masked entries are exactly zero.
    """

    per_head: tuple[np.ndarray, ...]
    window_len: int

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "per_head", tuple(np.asarray(a, dtype=np.float64) for a in self.per_head))
        if not self.per_head:
            raise ConfigError("scores must cover at least one head")
        shapes = {a.shape for a in self.per_head}
        if len(shapes) != 1:
            raise ConfigError(f"score matrices disagree on shape: {sorted(shapes)}")
        rows, _ = self.per_head[0].shape
        if not 1 <= self.window_len <= rows:
            raise ConfigError(
                f"window_len {self.window_len} outside [1, {rows}] query rows")
        for a in self.per_head:
            if np.any(a < 0):
                raise ConfigError("attention scores must be non-negative")
            if not np.allclose(a.sum(axis=1), 1.0, atol=1e-5):
                raise ConfigError("each attention row must sum to 1")

    @property
    def seq_len(self) -> int:
        return self.per_head[0].shape[1]


def _pair_angles(position: float, head_dim: int, rope_base: float) -> np.ndarray:
    exponents = np.arange(head_dim // 2, dtype=np.float64) * (-2.0 / head_dim)
    return position * rope_base ** exponents


def apply_rope(vec: np.ndarray, position: int, config: ModelConfig) -> np.ndarray:
    """Rotate one vector to its sequence position.

    Uses the interleaved-pair convention: dimensions (2j, 2j+1) form a plane
    rotated by ``position * rope_base**(-2j/head_dim)``.  Position 0 is the
    identity; every rotation preserves the L2 norm.
    """
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (config.head_dim,):
        raise ConfigError(
            f"vector of shape {vec.shape} does not match head_dim {config.head_dim}")
    if position < 0:
        raise ConfigError(f"position must be non-negative, got {position}")
    angles = _pair_angles(float(position), config.head_dim, config.rope_base)
    cos, sin = np.cos(angles), np.sin(angles)
    out = np.empty_like(vec)
    even, odd = vec[0::2], vec[1::2]
    out[0::2] = even * cos - odd * sin
    out[1::2] = even * sin + odd * cos
    return out


def rope_rows(vectors: np.ndarray, positions: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Rotate a batch of row vectors, row ``i`` at ``positions[i]``."""
    vectors = np.asarray(vectors, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != config.head_dim:
        raise ConfigError(
            f"batch of shape {vectors.shape} does not match head_dim {config.head_dim}")
    exponents = np.arange(config.head_dim // 2, dtype=np.float64) * (-2.0 / config.head_dim)
    angles = positions[:, None] * config.rope_base ** exponents[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    out = np.empty_like(vectors)
    even, odd = vectors[:, 0::2], vectors[:, 1::2]
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


def attention_weights(
    queries: np.ndarray,
    head: HeadCache,
    config: ModelConfig,
    query_positions: np.ndarray | None = None,
) -> AttentionScores:
    """Masked softmax attention of a query window against one head's cache.

    Queries and cached keys are both pre-rotation; the rotary embedding is
    applied to each at its own position before the scaled dot product.  A
    query at position p may only attend cached tokens at positions <= p.

    Args:
        queries: (window, head_dim) pre-rotation query vectors.
        head: cache to attend over.
        config: model geometry.
        query_positions: positions of the query rows; defaults to the last
            ``window`` cached positions (the observation window).

    Returns:
        AttentionScores holding one (window, tokens) matrix.
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim == 1:
        queries = queries[None, :]
    if len(head) == 0:
        raise ConfigError("empty context")
    if queries.shape[1] != config.head_dim:
        raise ConfigError(
            f"query width {queries.shape[1]} does not match head_dim {config.head_dim}")
    window = queries.shape[0]
    if query_positions is None:
        if window > len(head):
            raise ConfigError(
                f"window of {window} queries exceeds cache of {len(head)} tokens")
        query_positions = head.positions[-window:]
    query_positions = np.asarray(query_positions, dtype=np.int64)
    if query_positions.shape != (window,):
        raise ConfigError("one position required per query row")

    q_rot = rope_rows(queries, query_positions, config)
    k_rot = rope_rows(head.keys_pre_rope, head.positions, config)
    logits = q_rot @ k_rot.T / math.sqrt(config.head_dim)
    masked = head.positions[None, :] > query_positions[:, None]
    if np.any(masked.all(axis=1)):
        raise ConfigError("a query attends no cached position")
    logits[masked] = -np.inf
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights[masked] = 0.0
    weights /= weights.sum(axis=1, keepdims=True)
    return AttentionScores(per_head=(weights,), window_len=window)

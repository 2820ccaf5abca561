"""Score-driven token eviction: per-head top-k retention over the context,
with the observation window always kept.  GQA caches are either unfolded
(one KV head per query head) or evicted per group with averaged scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .budget import retained_context_count
from .errors import ConfigError
from .model import HeadCache, LayerCache, ModelConfig
from .scoring import GQA_AVERAGED, PER_HEAD, AccumulatedScores

__all__ = [
    "PER_HEAD_UNFOLDED",
    "GROUP_AVERAGED",
    "RetentionSet",
    "select_retained",
    "unfold_gqa",
    "evict_layer",
]

PER_HEAD_UNFOLDED = "per-head-unfolded"
GROUP_AVERAGED = "group-averaged"


@dataclass(frozen=True)
class RetentionSet:
    """Per-head retained context indices; everything at or past
    ``window_start`` is implicitly retained."""

    per_head: tuple[np.ndarray, ...]
    window_start: int

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "per_head", tuple(np.asarray(v, dtype=np.int64) for v in self.per_head))
        for eta in self.per_head:
            if eta.size and (eta.min() < 0 or eta.max() >= self.window_start):
                raise ConfigError("retained indices must lie inside the context")
            if eta.size > 1 and not np.all(np.diff(eta) > 0):
                raise ConfigError("retained indices must be strictly increasing")


def select_retained(scores: np.ndarray, ratio: float, context_len: int) -> np.ndarray:
    """Indices of the floor(ratio * context_len) highest scores, ascending.

    Ties break toward the lower index, so the result is fully deterministic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (context_len,):
        raise ConfigError(
            f"expected {context_len} scores, got shape {scores.shape}")
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"retention ratio must lie in [0, 1], got {ratio}")
    k = retained_context_count(ratio, context_len)
    if k == context_len:
        return np.arange(context_len, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def unfold_gqa(layer: LayerCache, config: ModelConfig) -> LayerCache:
    """Repeat each KV head ``heads_per_group`` times so eviction can act per
    query head.  Head j of the result aliases head j // heads_per_group."""
    if layer.is_unfolded:
        raise ConfigError("layer is already unfolded")
    if len(layer.heads) != config.num_kv_heads:
        raise ConfigError(
            f"expected {config.num_kv_heads} KV heads, got {len(layer.heads)}")
    heads = tuple(
        layer.heads[j // config.heads_per_group]
        for j in range(config.num_q_heads))
    return LayerCache(layer_index=layer.layer_index, heads=heads, is_unfolded=True)


def _prune_head(head: HeadCache, eta: np.ndarray, window_start: int) -> HeadCache:
    keep = np.concatenate([eta, np.arange(window_start, len(head), dtype=np.int64)])
    return HeadCache(
        positions=head.positions[keep],
        keys_pre_rope=head.keys_pre_rope[keep],
        values=head.values[keep],
    )


def evict_layer(
    layer: LayerCache,
    scores: AccumulatedScores,
    ratio: float,
    mode: str = PER_HEAD_UNFOLDED,
) -> tuple[LayerCache, RetentionSet]:
    """Apply top-k retention to every head of a layer.

    In per-head-unfolded mode the layer must already be unfolded and scores
    carry one vector per head.  In group-averaged mode the layer stays folded
    and all heads of a group share the retention set from the averaged
    scores.  Retained tokens keep their original positions; the window
    follows them unchanged.
    """
    if mode not in (PER_HEAD_UNFOLDED, GROUP_AVERAGED):
        raise ConfigError(f"unknown eviction mode: {mode!r}")
    expected_variant = PER_HEAD if mode == PER_HEAD_UNFOLDED else GQA_AVERAGED
    if scores.variant != expected_variant:
        raise ConfigError(
            f"{mode} eviction needs {expected_variant} scores, got {scores.variant}")
    if mode == PER_HEAD_UNFOLDED and not layer.is_unfolded:
        raise ConfigError("per-head eviction requires an unfolded layer")
    if mode == GROUP_AVERAGED and layer.is_unfolded:
        raise ConfigError("group-averaged eviction requires a folded layer")
    if len(scores.per_head) != len(layer.heads):
        raise ConfigError(
            f"{len(scores.per_head)} score vectors for {len(layer.heads)} heads")

    l = layer.token_count()
    lc = scores.context_len
    if lc > l:
        raise ConfigError(f"score length {lc} exceeds cache of {l} tokens")

    retained = tuple(
        select_retained(vec, ratio, lc) for vec in scores.per_head)
    heads = tuple(
        _prune_head(head, eta, lc) for head, eta in zip(layer.heads, retained))
    pruned = LayerCache(
        layer_index=layer.layer_index, heads=heads, is_unfolded=layer.is_unfolded)
    return pruned, RetentionSet(per_head=retained, window_start=lc)

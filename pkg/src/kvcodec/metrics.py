"""Compression-ratio accounting.

Two views are always reported side by side: the paper-style per-layer ratio
r = r1 * r2 * r3 (r3 implemented verbatim, although it exceeds 1 and is not
a bits-per-token derivation; a conjectured index+magnitude variant is
computed alongside), and exact bit counts over the records actually stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codebook import CompressedLayer
from .errors import ConfigError
from .model import ModelConfig

__all__ = [
    "LayerRatios",
    "CompressionReport",
    "layer_ratios",
    "aggregate_ratio",
    "exact_bits",
]


@dataclass(frozen=True)
class LayerRatios:
    """Reserve-ratio factors for one layer: eviction (r1), replacement (r2),
    dtype conversion (r3), and their product."""

    layer_index: int
    r1: float
    r2: float
    r3: float
    r3_conjectured: float
    r_layer: float
    r_layer_conjectured: float
    original_vectors: int
    retained_vectors: int
    codebook_entries: int


def layer_ratios(
    original_counts: Sequence[int],
    retained_counts: Sequence[int],
    codebook_size: int,
    config: ModelConfig,
    unfolded: bool,
    layer_index: int = 0,
    r3_override: float | None = None,
) -> LayerRatios:
    """Per-layer ratios from per-head token counts and the codebook size.

    ``original_counts`` and ``retained_counts`` are per stored head (all KV
    heads, or all query heads when the cache was unfolded before eviction);
    each head contributes a key and a value vector per token.
    ``codebook_size`` is the combined entry count of the key and value books.
    """
    heads = config.num_q_heads if unfolded else config.num_kv_heads
    if len(original_counts) != heads or len(retained_counts) != heads:
        raise ConfigError(
            f"expected counts for {heads} heads, got {len(original_counts)}"
            f" original / {len(retained_counts)} retained")
    original = 2 * int(np.sum(original_counts))
    retained = 2 * int(np.sum(retained_counts))
    if original <= 0:
        raise ConfigError("original vector count must be positive")
    if retained <= 0:
        raise ConfigError("retained vector count must be positive")
    if codebook_size <= 0:
        raise ConfigError("codebook size must be positive")

    r1 = retained / original
    r2 = codebook_size / retained
    d_h, ib, kb = config.head_dim, config.index_bits, config.value_dtype_bits
    r3 = (d_h + ib / (kb + 1)) / d_h
    r3_conjectured = (ib / kb + 1) / d_h
    effective_r3 = r3 if r3_override is None else r3_override
    return LayerRatios(
        layer_index=layer_index,
        r1=r1,
        r2=r2,
        r3=r3,
        r3_conjectured=r3_conjectured,
        r_layer=r1 * r2 * effective_r3,
        r_layer_conjectured=r1 * r2 * r3_conjectured,
        original_vectors=original,
        retained_vectors=retained,
        codebook_entries=codebook_size,
    )


def aggregate_ratio(per_layer: Sequence[LayerRatios]) -> float:
    """Mean of the per-layer ratios."""
    if not per_layer:
        raise ConfigError("cannot aggregate an empty ratio list")
    return float(np.mean([lr.r_layer for lr in per_layer]))


def exact_bits(
    compressed: CompressedLayer | Sequence[CompressedLayer],
    config: ModelConfig,
    seq_len: int,
    *,
    float_bits: int | None = None,
    index_bits: int | None = None,
) -> tuple[int, int]:
    """Ground-truth bit accounting over compressed layers.

    Original: seq_len tokens per KV head, a key and a value vector each, at
    ``float_bits`` per scalar.  Compressed: codebook entries at full vector
    width, one (index, magnitude) pair per stored key and value record, and
    one index per stored position.  Framing/header overhead is reported
    separately by the archive writer, never here.

    Widths default to the config's accounting widths; pass the archive
    format's physical widths to audit a file on disk.
    """
    layers = [compressed] if isinstance(compressed, CompressedLayer) else list(compressed)
    if seq_len <= 0:
        raise ConfigError(f"original sequence length must be positive, got {seq_len}")
    fb = config.value_dtype_bits if float_bits is None else float_bits
    ib = config.index_bits if index_bits is None else index_bits

    original = len(layers) * seq_len * config.num_kv_heads * 2 * config.head_dim * fb
    payload = 0
    for layer in layers:
        entries = len(layer.key_book) + len(layer.value_book)
        records = layer.token_records()
        payload += entries * config.head_dim * fb
        payload += records * 2 * (ib + fb)
        payload += records * ib
    return original, payload


@dataclass(frozen=True)
class CompressionReport:
    """Everything the compression run measured, per layer and aggregated."""

    per_layer: tuple[LayerRatios, ...]
    aggregate: float
    aggregate_conjectured: float
    exact_bits_original: int
    exact_bits_compressed: int
    exact_ratio: float
    file_payload_bits: int
    file_overhead_bits: int
    per_layer_bits: tuple[tuple[int, int], ...]
    budget_plan_dict: dict
    config: ModelConfig
    theta_key: float
    theta_value: float
    run: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_layer": [
                {
                    "layer": lr.layer_index,
                    "r1": lr.r1,
                    "r2": lr.r2,
                    "r3": lr.r3,
                    "r3_conjectured": lr.r3_conjectured,
                    "r_layer": lr.r_layer,
                    "r_layer_conjectured": lr.r_layer_conjectured,
                    "original_vectors": lr.original_vectors,
                    "retained_vectors": lr.retained_vectors,
                    "codebook_entries": lr.codebook_entries,
                    "exact_bits_original": self.per_layer_bits[i][0],
                    "exact_bits_compressed": self.per_layer_bits[i][1],
                }
                for i, lr in enumerate(self.per_layer)
            ],
            "aggregate": {
                "r": self.aggregate,
                "r_conjectured": self.aggregate_conjectured,
                "exact_bits_original": self.exact_bits_original,
                "exact_bits_compressed": self.exact_bits_compressed,
                "exact_ratio": self.exact_ratio,
                "file_payload_bits": self.file_payload_bits,
                "file_overhead_bits": self.file_overhead_bits,
                "file_total_bits": self.file_payload_bits + self.file_overhead_bits,
            },
            "budget_plan": self.budget_plan_dict,
            "thresholds": {"key": self.theta_key, "value": self.theta_value},
            "model": {
                "hidden_dim": self.config.hidden_dim,
                "head_dim": self.config.head_dim,
                "num_q_heads": self.config.num_q_heads,
                "num_kv_heads": self.config.num_kv_heads,
                "heads_per_group": self.config.heads_per_group,
                "num_layers": self.config.num_layers,
                "rope_base": self.config.rope_base,
                "value_dtype_bits": self.config.value_dtype_bits,
                "index_bits": self.config.index_bits,
            },
            "run": self.run,
        }

"""End-to-end compression pipeline: score, allocate, (unfold), evict,
codebook, account.  Per-layer work fans out to a thread pool; results are
reduced in layer order so worker count never changes output bytes."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import eviction as ev
from .budget import BudgetPlan, build_budget_plan, retained_context_count
from .codebook import CompressedLayer, compress_layer, reconstruct, TokenRefs
from .errors import BudgetError, ConfigError
from .formats import (ARCHIVE_FLOAT_BITS, ARCHIVE_INDEX_BITS, CacheDump,
                      CompressedArchive, archive_overhead_bits)
from .metrics import (CompressionReport, LayerRatios, aggregate_ratio,
                      exact_bits, layer_ratios)
from .model import AttentionScores, HeadCache, LayerCache, ModelConfig, attention_weights
from .scoring import (GQA_AVERAGED, AccumulatedScores, accumulated_scores,
                      gqa_accumulated_scores)

__all__ = ["RunConfig", "compress_dump", "reconstruct_dump", "resolve_workers"]

WORKERS_ENV = "KVCODEC_WORKERS"


@dataclass(frozen=True)
class RunConfig:
    """Knobs for one compression or simulation run."""

    reserve_ratio: float = 1.0
    window_len: int = 8
    theta_key: float = 0.98
    theta_value: float = 0.95
    min_layer_ratio: float = 0.05
    gqa_mode: str = ev.PER_HEAD_UNFOLDED
    strict_paper: bool = False
    uniform_fallback: bool = False
    seed: int = 0
    workers: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.reserve_ratio <= 1.0:
            raise ConfigError(
                f"reserve ratio must lie in (0, 1], got {self.reserve_ratio}")
        for name in ("theta_key", "theta_value"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.window_len < 1:
            raise ConfigError(f"window_len must be at least 1, got {self.window_len}")
        if self.gqa_mode not in (ev.PER_HEAD_UNFOLDED, ev.GROUP_AVERAGED):
            raise ConfigError(f"unknown gqa mode: {self.gqa_mode!r}")


def resolve_workers(workers: int | None) -> int:
    if workers is not None:
        return max(1, workers)
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def layer_attention(
    layer: LayerCache,
    queries: np.ndarray,
    config: ModelConfig,
) -> AttentionScores:
    """Window attention for every query head against its KV head.

    ``queries`` is (num_q_heads, window, head_dim).  On a folded GQA layer
    query head i attends KV head i // heads_per_group; on an unfolded layer
    (or MHA) it attends head i directly.
    """
    per_head = []
    for i in range(config.num_q_heads):
        kv = i if len(layer.heads) == config.num_q_heads else i // config.heads_per_group
        scores = attention_weights(queries[i], layer.heads[kv], config)
        per_head.append(scores.per_head[0])
    return AttentionScores(per_head=tuple(per_head), window_len=queries.shape[1])


def score_layer(
    layer: LayerCache,
    queries: np.ndarray,
    config: ModelConfig,
    mode: str,
) -> AccumulatedScores:
    """Accumulated scores in the shape the chosen eviction mode expects."""
    attn = layer_attention(layer, queries, config)
    if mode == ev.PER_HEAD_UNFOLDED:
        return accumulated_scores(attn)
    groups = []
    for g in range(config.num_kv_heads):
        start = g * config.heads_per_group
        group = AttentionScores(
            per_head=attn.per_head[start:start + config.heads_per_group],
            window_len=attn.window_len)
        groups.append(gqa_accumulated_scores([group], config.heads_per_group).per_head[0])
    return AccumulatedScores(per_head=tuple(groups), variant=GQA_AVERAGED)


def _compress_one_layer(
    layer: LayerCache,
    queries: np.ndarray | None,
    plan: BudgetPlan,
    cfg: RunConfig,
    config: ModelConfig,
) -> tuple[CompressedLayer, LayerRatios]:
    l = layer.token_count()
    ratio = plan.per_layer[layer.layer_index]
    skip_eviction = cfg.reserve_ratio == 1.0

    if cfg.gqa_mode == ev.PER_HEAD_UNFOLDED and not layer.is_unfolded:
        work = ev.unfold_gqa(layer, config)
    else:
        work = layer

    if skip_eviction:
        pruned = work
        retained_counts = [len(h) for h in work.heads]
    else:
        if queries is None:
            raise BudgetError(
                "dump carries no query windows; eviction needs them (use r=1 "
                "for replacement-only compression)")
        scores = score_layer(layer, queries, config, cfg.gqa_mode)
        pruned, _ = ev.evict_layer(work, scores, ratio, cfg.gqa_mode)
        retained_counts = [len(h) for h in pruned.heads]

    compressed = compress_layer(pruned, cfg.theta_key, cfg.theta_value)
    ratios = layer_ratios(
        original_counts=[l] * len(work.heads),
        retained_counts=retained_counts,
        codebook_size=len(compressed.key_book) + len(compressed.value_book),
        config=config,
        unfolded=work.is_unfolded,
        layer_index=layer.layer_index,
    )
    return compressed, ratios


def compress_dump(dump: CacheDump, cfg: RunConfig) -> tuple[CompressedArchive, CompressionReport]:
    """Run the full prefill pipeline over a dump."""
    config = dump.config
    counts = {layer.token_count() for layer in dump.layers}
    if len(counts) != 1:
        raise ConfigError(f"layers disagree on token count: {sorted(counts)}")
    l = counts.pop()
    plan = build_budget_plan(
        cfg.reserve_ratio, l, cfg.window_len, config.num_layers,
        cfg.min_layer_ratio, strict_paper=cfg.strict_paper,
        uniform_fallback=cfg.uniform_fallback)

    if dump.query_windows is not None and dump.window_len != cfg.window_len:
        raise ConfigError(
            f"dump query windows span {dump.window_len} positions, run expects"
            f" {cfg.window_len}")

    def job(i: int) -> tuple[CompressedLayer, LayerRatios]:
        queries = dump.query_windows[i] if dump.query_windows is not None else None
        return _compress_one_layer(dump.layers[i], queries, plan, cfg, config)

    workers = resolve_workers(cfg.workers)
    if workers == 1:
        results = [job(i) for i in range(len(dump.layers))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(len(dump.layers))))

    layers = tuple(r[0] for r in results)
    per_layer = tuple(r[1] for r in results)
    archive = CompressedArchive(
        config=config, plan=plan, theta_key=cfg.theta_key,
        theta_value=cfg.theta_value, layers=layers)

    original_bits, compressed_bits = exact_bits(list(layers), config, l)
    per_layer_bits = tuple(exact_bits(layer, config, l) for layer in layers)
    report = CompressionReport(
        per_layer=per_layer,
        aggregate=aggregate_ratio(per_layer),
        aggregate_conjectured=float(np.mean([lr.r_layer_conjectured for lr in per_layer])),
        exact_bits_original=original_bits,
        exact_bits_compressed=compressed_bits,
        exact_ratio=compressed_bits / original_bits,
        file_payload_bits=exact_bits(
            list(layers), config, l,
            float_bits=ARCHIVE_FLOAT_BITS, index_bits=ARCHIVE_INDEX_BITS)[1],
        file_overhead_bits=archive_overhead_bits(archive),
        per_layer_bits=per_layer_bits,
        budget_plan_dict=plan.to_dict(),
        config=config,
        theta_key=cfg.theta_key,
        theta_value=cfg.theta_value,
        run=asdict(cfg),
    )
    return archive, report


def reconstruct_dump(archive: CompressedArchive, apply_rotary: bool = False) -> CacheDump:
    """Rebuild a cache dump from an archive.

    Keys come back pre-rotation by default; ``apply_rotary`` bakes the
    rotation in at each token's stored position instead (values never
    rotate).  The result carries no query windows.
    """
    config = archive.config
    layers = []
    for layer in archive.layers:
        heads = []
        for head in layer.heads:
            key_refs = TokenRefs(
                refs=head.key_refs.tolist(), magnitudes=head.key_mags.tolist())
            value_refs = TokenRefs(
                refs=head.value_refs.tolist(), magnitudes=head.value_mags.tolist())
            keys = reconstruct(
                layer.key_book, key_refs, head.positions, apply_rotary, config)
            values = reconstruct(layer.value_book, value_refs, None, False, config)
            heads.append(HeadCache(
                positions=head.positions, keys_pre_rope=keys, values=values))
        layers.append(LayerCache(
            layer_index=layer.layer_index, heads=tuple(heads),
            is_unfolded=layer.is_unfolded))
    return CacheDump(config=config, layers=tuple(layers), query_windows=None)

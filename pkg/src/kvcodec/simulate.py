"""Fidelity harness and synthetic cache generation.

``generate_synthetic`` builds dumps with controllable similarity structure:
per (layer, key-or-value) a set of cluster directions shared by every head,
with guaranteed within-cluster and cross-cluster cosine bounds.
``simulate_decode`` runs attention with the full cache and with the
compressed cache after reconstruction, optionally through decode steps that
append fresh tokens to both sides, and reports the divergence of the
per-head context vectors together with an analytic error bound.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codebook import TokenRefs, assign_or_extend, reconstruct
from .errors import ConfigError
from .formats import CacheDump, CompressedArchive
from .model import HeadCache, LayerCache, ModelConfig, attention_weights
from .pipeline import RunConfig, compress_dump

__all__ = [
    "SyntheticSpec",
    "FidelityResult",
    "LayerFidelity",
    "generate_synthetic",
    "generate_random",
    "simulate_decode",
    "write_fidelity_json",
    "write_fidelity_csv",
]


@dataclass(frozen=True)
class SyntheticSpec:
    """Cluster structure for generated caches.

    Any two tokens of one cluster end up with cosine above
    ``within_cluster_min_cos``; tokens of different clusters stay below
    ``cross_cluster_max_cos``.  ``num_clusters = 0`` requests unstructured
    random vectors instead.
    """

    num_clusters: int
    within_cluster_min_cos: float = 0.95
    cross_cluster_max_cos: float = 0.5
    tokens_per_cluster: int | None = None
    magnitude_range: tuple[float, float] = (0.5, 2.0)
    query_scale: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_clusters < 0:
            raise ConfigError(f"num_clusters must be non-negative, got {self.num_clusters}")
        if self.num_clusters:
            if not 0.0 < self.within_cluster_min_cos < 1.0:
                raise ConfigError("within-cluster bound must lie in (0, 1)")
            if self.within_cluster_min_cos <= self.cross_cluster_max_cos:
                raise ConfigError(
                    f"infeasible similarity bounds: within {self.within_cluster_min_cos}"
                    f" <= cross {self.cross_cluster_max_cos}")
        lo, hi = self.magnitude_range
        if not 0.0 < lo <= hi:
            raise ConfigError(f"magnitude range must be positive, got {self.magnitude_range}")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _sample_centers(rng: np.random.Generator, k: int, dim: int,
                    max_cos: float) -> np.ndarray:
    centers: list[np.ndarray] = []
    for _ in range(20000):
        if len(centers) == k:
            break
        c = _unit(rng.standard_normal(dim))
        if all(abs(float(c @ other)) < max_cos for other in centers):
            centers.append(c)
    if len(centers) != k:
        raise ConfigError(
            f"could not place {k} cluster centres with pairwise |cos| <"
            f" {max_cos:.4f} in {dim} dimensions")
    return np.stack(centers)


def _cluster_sizes(total: int, k: int) -> list[int]:
    base, extra = divmod(total, k)
    return [base + (1 if i < extra else 0) for i in range(k)]


def _member(rng: np.random.Generator, center: np.ndarray, target_cos: float) -> np.ndarray:
    sigma = math.tan(math.acos(target_cos))
    for _ in range(100):
        g = rng.standard_normal(len(center))
        g -= (g @ center) * center
        norm = np.linalg.norm(g)
        if norm == 0.0:
            continue
        v = _unit(center + rng.uniform(0.0, sigma) * (g / norm))
        if float(v @ center) > target_cos:
            return v
    raise ConfigError("failed to sample a cluster member inside the cosine bound")


def _f32_exact(a: np.ndarray) -> np.ndarray:
    # Dumps are float32 on disk; quantize now so write/read round-trips exactly.
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _clustered_batch(
    rng: np.random.Generator,
    spec: SyntheticSpec,
    dim: int,
    seq_len: int,
    num_heads: int,
) -> tuple[np.ndarray, np.ndarray]:
    """(heads, tokens, dim) directions sharing one centre set, plus assignments."""
    k = spec.num_clusters
    within = spec.within_cluster_min_cos
    cross = spec.cross_cluster_max_cos
    # Members stay within theta_t of their centre, so pairwise within-cluster
    # cosine is at least cos(2*theta_t) > within, and cross-cluster cosine is
    # at most cos(angle(centres) - 2*theta_t) < cross.
    target_cos = math.sqrt((1.0 + within) / 2.0)
    target_cos = target_cos + (1.0 - target_cos) * 0.5
    theta_t = math.acos(target_cos)
    min_center_angle = math.acos(cross) + 2.0 * theta_t
    if k > 1 and min_center_angle >= math.pi:
        raise ConfigError("infeasible similarity bounds: no centre spacing exists")
    center_max_cos = math.cos(min(min_center_angle * 1.02, math.pi * 0.999))

    for _ in range(8):
        centers = _sample_centers(rng, k, dim, center_max_cos)
        sizes = _cluster_sizes(seq_len, k)
        assignment = np.repeat(np.arange(k), sizes)
        batch = np.empty((num_heads, seq_len, dim))
        for h in range(num_heads):
            for t, c in enumerate(assignment):
                batch[h, t] = _member(rng, centers[c], target_cos)
        batch = _f32_exact(batch)
        if _verify_clusters(batch, assignment, within, cross):
            return batch, assignment
    raise ConfigError("cluster generation kept violating its cosine bounds")


def _verify_clusters(batch: np.ndarray, assignment: np.ndarray,
                     within: float, cross: float) -> bool:
    pooled = batch.reshape(-1, batch.shape[-1])
    labels = np.tile(assignment, batch.shape[0])
    if len(pooled) > 4096:
        idx = np.linspace(0, len(pooled) - 1, 4096).astype(int)
        pooled, labels = pooled[idx], labels[idx]
    unit = pooled / np.linalg.norm(pooled, axis=1, keepdims=True)
    sim = unit @ unit.T
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(pooled), dtype=bool)
    if np.any(sim[same & off_diag] <= within):
        return False
    if np.any(sim[~same] >= cross):
        return False
    return True


def generate_random(
    config: ModelConfig,
    seq_len: int,
    window_len: int = 8,
    seed: int = 0,
    magnitude_range: tuple[float, float] = (0.5, 2.0),
    query_scale: float = 3.0,
) -> CacheDump:
    """Unstructured random dump: independent directions, no cluster bounds."""
    spec = SyntheticSpec(
        num_clusters=0, magnitude_range=magnitude_range,
        query_scale=query_scale, seed=seed)
    return generate_synthetic(spec, config, seq_len, window_len)


def generate_synthetic(
    spec: SyntheticSpec,
    config: ModelConfig,
    seq_len: int,
    window_len: int = 8,
) -> CacheDump:
    """Deterministic multi-layer dump with query windows.

    With clusters, all heads of a layer share one centre set per key/value
    role, so the per-layer pooled codebook collapses to exactly one entry
    per cluster at a threshold between the cross and within bounds.
    """
    if seq_len <= window_len:
        raise ConfigError(
            f"seq_len {seq_len} must exceed window_len {window_len}")
    if spec.tokens_per_cluster is not None:
        if spec.num_clusters == 0:
            raise ConfigError("tokens_per_cluster requires clusters")
        if spec.tokens_per_cluster * spec.num_clusters != seq_len:
            raise ConfigError(
                f"{spec.num_clusters} clusters x {spec.tokens_per_cluster}"
                f" tokens != seq_len {seq_len}")
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.magnitude_range
    dim = config.head_dim
    positions = np.arange(seq_len, dtype=np.int64)

    layers = []
    windows = []
    for layer_index in range(config.num_layers):
        role_dirs = {}
        for role in ("key", "value"):
            if spec.num_clusters:
                dirs, _ = _clustered_batch(
                    rng, spec, dim, seq_len, config.num_kv_heads)
            else:
                raw = rng.standard_normal((config.num_kv_heads, seq_len, dim))
                dirs = _f32_exact(raw / np.linalg.norm(raw, axis=2, keepdims=True))
            role_dirs[role] = dirs
        heads = []
        for h in range(config.num_kv_heads):
            k_mags = _f32_exact(rng.uniform(lo, hi, size=seq_len))
            v_mags = _f32_exact(rng.uniform(lo, hi, size=seq_len))
            heads.append(HeadCache(
                positions=positions,
                keys_pre_rope=_f32_exact(role_dirs["key"][h] * k_mags[:, None]),
                values=_f32_exact(role_dirs["value"][h] * v_mags[:, None]),
            ))
        layer = LayerCache(layer_index=layer_index, heads=tuple(heads))

        # Queries lean toward a few hot keys so attention, and therefore
        # eviction, is non-degenerate.
        window = np.empty((config.num_q_heads, window_len, dim))
        for i in range(config.num_q_heads):
            kv = i // config.heads_per_group
            for w in range(window_len):
                hot = layer.heads[kv].keys_pre_rope[rng.integers(0, seq_len)]
                blend = _unit(hot) + 0.5 * rng.standard_normal(dim)
                window[i, w] = spec.query_scale * _unit(blend)
        windows.append(_f32_exact(window))
        layers.append(layer)
    return CacheDump(config=config, layers=tuple(layers),
                     query_windows=tuple(windows))


@dataclass(frozen=True)
class LayerFidelity:
    """Per-head divergence stats for one layer."""

    layer_index: int
    max_abs: np.ndarray
    rms: np.ndarray
    analytic_bound: np.ndarray


@dataclass(frozen=True)
class FidelityResult:
    """Divergence of per-head context vectors, full vs compressed cache."""

    max_abs: float
    rms: float
    per_layer: tuple[LayerFidelity, ...]
    per_step: tuple[dict, ...]
    analytic_bound: float
    bound_valid: bool
    tolerance: float | None
    passed: bool | None
    steps: int

    def to_dict(self) -> dict:
        return {
            "max_abs": self.max_abs,
            "rms": self.rms,
            "analytic_bound": self.analytic_bound,
            "bound_valid": self.bound_valid,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "steps": self.steps,
            "per_layer": [
                {
                    "layer": lf.layer_index,
                    "max_abs": lf.max_abs.tolist(),
                    "rms": lf.rms.tolist(),
                    "analytic_bound": lf.analytic_bound.tolist(),
                }
                for lf in self.per_layer
            ],
        }


class _CompressedState:
    """Mutable decode-time view of one compressed layer."""

    def __init__(self, layer, config: ModelConfig):
        self.config = config
        self.key_book = layer.key_book
        self.value_book = layer.value_book
        self.heads = []
        for head in layer.heads:
            self.heads.append({
                "positions": list(head.positions),
                "key_refs": TokenRefs(
                    refs=head.key_refs.tolist(), magnitudes=head.key_mags.tolist()),
                "value_refs": TokenRefs(
                    refs=head.value_refs.tolist(), magnitudes=head.value_mags.tolist()),
            })

    def head_cache(self, j: int) -> HeadCache:
        h = self.heads[j]
        positions = np.asarray(h["positions"], dtype=np.int64)
        keys = reconstruct(self.key_book, h["key_refs"], None, False, self.config)
        values = reconstruct(self.value_book, h["value_refs"], None, False, self.config)
        return HeadCache(positions=positions, keys_pre_rope=keys, values=values)

    def append(self, j: int, position: int, key: np.ndarray, value: np.ndarray) -> None:
        h = self.heads[j]
        assign_or_extend(key, self.key_book, h["key_refs"])
        assign_or_extend(value, self.value_book, h["value_refs"])
        h["positions"].append(position)

    def value_mag_max(self, j: int) -> float:
        return max(self.heads[j]["value_refs"].magnitudes)

    def key_mag_max(self, j: int) -> float:
        return max(self.heads[j]["key_refs"].magnitudes)


def _context(queries: np.ndarray, head: HeadCache, config: ModelConfig,
             query_positions: np.ndarray | None = None) -> np.ndarray:
    scores = attention_weights(queries, head, config, query_positions)
    return scores.per_head[0] @ head.values


def simulate_decode(
    dump: CacheDump,
    cfg: RunConfig,
    steps: int = 0,
    tolerance: float | None = None,
) -> tuple[FidelityResult, CompressedArchive]:
    """Compare full-cache and compressed-cache attention outputs.

    The prefill comparison replays the dump's query windows; each decode
    step then draws one new token per KV head plus one query per query head,
    computes both sides' context vectors against the current caches, appends
    the token to both (compressed side through the merge-or-extend path),
    and records the divergence.
    """
    if steps < 0:
        raise ConfigError(f"steps must be non-negative, got {steps}")
    if dump.query_windows is None and steps == 0:
        raise ConfigError("dump has no query windows and no decode steps were requested")
    config = dump.config
    archive, _ = compress_dump(dump, cfg)
    seq_len = dump.layers[0].token_count()

    full_heads: list[list[HeadCache]] = [list(layer.heads) for layer in dump.layers]
    comp: list[_CompressedState] = [_CompressedState(l, config) for l in archive.layers]
    unfolded = len(archive.layers[0].heads) == config.num_q_heads

    h = config.num_q_heads
    m = config.num_layers
    sq_sum = np.zeros((m, h))
    sq_count = np.zeros((m, h))
    max_abs = np.zeros((m, h))
    q_norm_max = np.zeros((m, h))
    per_step_rows: list[dict] = []

    def compare(step: int, layer: int, queries_by_head, positions) -> None:
        for i in range(h):
            kv_full = i // config.heads_per_group
            kv_comp = i if unfolded else i // config.heads_per_group
            q = np.atleast_2d(queries_by_head[i])
            full_ctx = _context(q, full_heads[layer][kv_full], config, positions)
            comp_ctx = _context(q, comp[layer].head_cache(kv_comp), config, positions)
            delta = np.abs(full_ctx - comp_ctx)
            sq_sum[layer, i] += float((delta ** 2).sum())
            sq_count[layer, i] += delta.size
            max_abs[layer, i] = max(max_abs[layer, i], float(delta.max()))
            q_norm_max[layer, i] = max(
                q_norm_max[layer, i], float(np.linalg.norm(q, axis=1).max()))
            per_step_rows.append({
                "step": step, "layer": layer, "head": i,
                "max_abs": float(delta.max()),
                "rms": float(np.sqrt((delta ** 2).mean())),
            })

    if dump.query_windows is not None:
        for layer in range(m):
            compare(0, layer, dump.query_windows[layer], None)

    rng = np.random.default_rng(cfg.seed)
    for step in range(1, steps + 1):
        position = seq_len + step - 1
        for layer in range(m):
            new_keys, new_values = [], []
            for g in range(config.num_kv_heads):
                head = full_heads[layer][g]
                base = rng.integers(0, len(head))
                k = _unit(head.keys_pre_rope[base] + 0.35 * rng.standard_normal(config.head_dim))
                v = _unit(head.values[base] + 0.35 * rng.standard_normal(config.head_dim))
                k_mag = float(np.linalg.norm(head.keys_pre_rope[base])) * rng.uniform(0.9, 1.1)
                v_mag = float(np.linalg.norm(head.values[base])) * rng.uniform(0.9, 1.1)
                new_keys.append(k * k_mag)
                new_values.append(v * v_mag)
            queries = []
            for i in range(h):
                kv = i // config.heads_per_group
                hot = full_heads[layer][kv].keys_pre_rope[rng.integers(0, seq_len)]
                queries.append(3.0 * _unit(_unit(hot) + 0.5 * rng.standard_normal(config.head_dim)))
            compare(step, layer, queries, np.asarray([position]))
            for g in range(config.num_kv_heads):
                head = full_heads[layer][g]
                full_heads[layer][g] = HeadCache(
                    positions=np.append(head.positions, position),
                    keys_pre_rope=np.vstack([head.keys_pre_rope, new_keys[g]]),
                    values=np.vstack([head.values, new_values[g]]))
            for j in range(len(comp[layer].heads)):
                g = j // config.heads_per_group if unfolded else j
                comp[layer].append(j, position, new_keys[g], new_values[g])

    per_layer = []
    for layer in range(m):
        bound = np.zeros(h)
        for i in range(h):
            kv_comp = i if unfolded else i // config.heads_per_group
            m_v = comp[layer].value_mag_max(kv_comp)
            m_k = comp[layer].key_mag_max(kv_comp)
            delta_logit = (q_norm_max[layer, i] * m_k
                           * math.sqrt(2.0 * (1.0 - cfg.theta_key))
                           / math.sqrt(config.head_dim))
            bound[i] = (m_v * math.sqrt(2.0 * (1.0 - cfg.theta_value))
                        + (math.expm1(2.0 * delta_logit)) * m_v)
        rms = np.sqrt(np.divide(sq_sum[layer], np.maximum(sq_count[layer], 1)))
        per_layer.append(LayerFidelity(
            layer_index=layer, max_abs=max_abs[layer].copy(),
            rms=rms, analytic_bound=bound))

    overall_max = float(max_abs.max())
    overall_rms = float(np.sqrt(sq_sum.sum() / max(sq_count.sum(), 1)))
    overall_bound = float(max(lf.analytic_bound.max() for lf in per_layer))
    bound_valid = cfg.reserve_ratio == 1.0
    if tolerance is not None:
        passed = overall_max <= tolerance
    elif bound_valid:
        passed = overall_max <= overall_bound
    else:
        passed = None
    result = FidelityResult(
        max_abs=overall_max,
        rms=overall_rms,
        per_layer=tuple(per_layer),
        per_step=tuple(per_step_rows),
        analytic_bound=overall_bound,
        bound_valid=bound_valid,
        tolerance=tolerance,
        passed=passed,
        steps=steps,
    )
    return result, archive


def write_fidelity_json(result: FidelityResult, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_fidelity_csv(result: FidelityResult, path: str | Path) -> None:
    """Per-step rows: step 0 is the prefill window replay."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "layer", "head", "max_abs", "rms"])
        for row in result.per_step:
            writer.writerow([row["step"], row["layer"], row["head"],
                             repr(row["max_abs"]), repr(row["rms"])])

"""Layer-wise cache budget: a global reserve ratio is spread across layers by
linear interpolation between a near-full shallow endpoint and a minimal deep
endpoint, preserving the mean exactly.

The published form of the deep endpoint for r_c > midpoint is ``1 - 2*r_c``,
which goes negative and breaks mean preservation; the corrected ``2*r_c - 1``
is the default, with the printed variant available behind ``strict_paper``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetError, ConfigError

__all__ = [
    "BudgetPlan",
    "context_reserve_ratio",
    "endpoint_ratios",
    "layer_ratio",
    "build_budget_plan",
    "retained_context_count",
]


@dataclass(frozen=True)
class BudgetPlan:
    """Per-layer context reserve ratios derived from one global ratio."""

    global_ratio: float
    context_ratio: float
    endpoints: tuple[float, float]
    per_layer: tuple[float, ...]
    min_ratio: float
    seq_len: int
    window_len: int

    @property
    def midpoint(self) -> float:
        return 0.5 * (1.0 + self.min_ratio)

    @property
    def num_layers(self) -> int:
        return len(self.per_layer)

    def to_dict(self) -> dict:
        return {
            "global_ratio": self.global_ratio,
            "context_ratio": self.context_ratio,
            "endpoints": list(self.endpoints),
            "per_layer": list(self.per_layer),
            "min_ratio": self.min_ratio,
            "midpoint": self.midpoint,
            "seq_len": self.seq_len,
            "window_len": self.window_len,
        }


def context_reserve_ratio(r: float, l: int, l_w: int) -> float:
    """Reserve ratio of the context once the always-kept window is paid for.

    r_c = (r*l - l_w) / (l - l_w)
    """
    if not 0.0 < r <= 1.0:
        raise BudgetError(f"reserve ratio must lie in (0, 1], got {r}")
    if l_w < 1:
        raise BudgetError(f"observation window must be at least 1, got {l_w}")
    if l <= l_w:
        raise BudgetError(f"sequence of {l} tokens does not exceed window of {l_w}")
    if r * l <= l_w:
        raise BudgetError(
            f"budget below observation window: r*l = {r * l:.3f} <= l_w = {l_w}")
    return (r * l - l_w) / (l - l_w)


def endpoint_ratios(
    r_c: float,
    beta: float,
    *,
    strict_paper: bool = False,
    uniform_fallback: bool = False,
) -> tuple[float, float]:
    """Shallow- and deep-layer context ratios whose mean equals ``r_c``.

    For beta < r_c <= alpha (= (1+beta)/2): (2*r_c - beta, beta).
    For alpha < r_c <= 1:                   (1, 2*r_c - 1), continuous at alpha.

    ``strict_paper`` switches the second branch to the published ``1 - 2*r_c``.
    ``uniform_fallback`` turns the r_c <= beta failure into a flat (r_c, r_c)
    allocation instead.
    """
    if not 0.0 < beta < 1.0:
        raise BudgetError(f"minimum layer ratio must lie in (0, 1), got {beta}")
    if r_c > 1.0:
        raise BudgetError(f"context ratio cannot exceed 1, got {r_c}")
    if r_c <= beta:
        if uniform_fallback:
            return (r_c, r_c)
        raise BudgetError(
            f"requested budget below per-layer minimum: r_c = {r_c:.4f} <= beta = {beta}")
    alpha = 0.5 * (1.0 + beta)
    if r_c <= alpha:
        return (min(2.0 * r_c - beta, 1.0), beta)
    if strict_paper:
        return (1.0, 1.0 - 2.0 * r_c)
    return (1.0, max(2.0 * r_c - 1.0, beta))


def layer_ratio(layer: int, num_layers: int, endpoints: tuple[float, float]) -> float:
    """Linear interpolation between the endpoint ratios."""
    if num_layers < 1:
        raise ConfigError(f"num_layers must be positive, got {num_layers}")
    if not 0 <= layer < num_layers:
        raise ConfigError(f"layer {layer} outside [0, {num_layers})")
    first, last = endpoints
    if num_layers == 1:
        return first
    return first + (last - first) / (num_layers - 1) * layer


def build_budget_plan(
    r: float,
    l: int,
    l_w: int,
    num_layers: int,
    beta: float = 0.05,
    *,
    strict_paper: bool = False,
    uniform_fallback: bool = False,
) -> BudgetPlan:
    r_c = context_reserve_ratio(r, l, l_w)
    endpoints = endpoint_ratios(
        r_c, beta, strict_paper=strict_paper, uniform_fallback=uniform_fallback)
    per_layer = tuple(
        layer_ratio(lam, num_layers, endpoints) for lam in range(num_layers))
    return BudgetPlan(
        global_ratio=r,
        context_ratio=r_c,
        endpoints=endpoints,
        per_layer=per_layer,
        min_ratio=beta,
        seq_len=l,
        window_len=l_w,
    )


def retained_context_count(ratio: float, context_len: int) -> int:
    """floor(ratio * context_len), with a tiny epsilon so exact products such
    as (2/3)*3 do not land one below the intended integer."""
    if context_len < 0:
        raise ConfigError(f"context length must be non-negative, got {context_len}")
    return min(context_len, int(math.floor(ratio * context_len + 1e-9)))

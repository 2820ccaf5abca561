"""Accumulated attention scores, cosine-similarity matrices, and the two
diagnostic profiles (attention sparsity, constituent similarity)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .model import AttentionScores

__all__ = [
    "PER_HEAD",
    "GQA_AVERAGED",
    "AccumulatedScores",
    "SimilarityMatrix",
    "accumulated_scores",
    "gqa_accumulated_scores",
    "cosine_similarity_matrix",
    "sparsity_profile",
    "similarity_census",
]

PER_HEAD = "per-head"
GQA_AVERAGED = "gqa-averaged"


@dataclass(frozen=True)
class AccumulatedScores:
    """Per-token importance over the context (window tokens excluded)."""

    per_head: tuple[np.ndarray, ...]
    variant: str

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "per_head", tuple(np.asarray(v, dtype=np.float64) for v in self.per_head))
        if self.variant not in (PER_HEAD, GQA_AVERAGED):
            raise ConfigError(f"unknown score variant: {self.variant!r}")
        lengths = {len(v) for v in self.per_head}
        if len(lengths) > 1:
            raise ConfigError(f"score vectors disagree on context length: {sorted(lengths)}")
        for v in self.per_head:
            if v.size and v.min() < 0:
                raise ConfigError("accumulated scores must be non-negative")

    @property
    def context_len(self) -> int:
        return len(self.per_head[0]) if self.per_head else 0


@dataclass(frozen=True)
class SimilarityMatrix:
    """Symmetric pairwise-cosine matrix with unit diagonal."""

    entries: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", np.asarray(self.entries, dtype=np.float64))
        s = self.entries
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ConfigError(f"similarity matrix must be square, got {s.shape}")
        if np.any(np.abs(s) > 1.0):
            raise ConfigError("cosine similarities must lie in [-1, 1]")
        if not np.allclose(np.diag(s), 1.0, atol=1e-6):
            raise ConfigError("similarity diagonal must be 1")
        if not np.allclose(s, s.T, atol=1e-9):
            raise ConfigError("similarity matrix must be symmetric")


def accumulated_scores(scores: AttentionScores) -> AccumulatedScores:
    """Mean attention each context token receives from the window queries.

    For context token ``a`` the score is the sum of its column over the last
    ``window_len`` query rows, divided by ``seq_len - a`` (the number of
    queries that could causally attend it).  Tokens inside the window are
    excluded from the output.
    """
    l = scores.seq_len
    lw = scores.window_len
    if l < lw:
        raise ConfigError("window covers entire sequence")
    lc = l - lw
    denom = l - np.arange(lc, dtype=np.float64)
    out = []
    for a in scores.per_head:
        sums = a[-lw:, :lc].sum(axis=0)
        out.append(sums / denom)
    return AccumulatedScores(per_head=tuple(out), variant=PER_HEAD)


def gqa_accumulated_scores(
    scores_for_group: Sequence[AttentionScores],
    heads_per_group: int,
) -> AccumulatedScores:
    """Average the accumulated scores of the query heads sharing one KV head."""
    matrices = sum(len(s.per_head) for s in scores_for_group)
    if matrices != heads_per_group:
        raise ConfigError(
            f"expected {heads_per_group} query-head score matrices, got {matrices}")
    parts = []
    for s in scores_for_group:
        parts.extend(accumulated_scores(s).per_head)
    mean = np.mean(np.stack(parts, axis=0), axis=0)
    return AccumulatedScores(per_head=(mean,), variant=GQA_AVERAGED)


def cosine_similarity_matrix(vectors: np.ndarray) -> SimilarityMatrix:
    """Pairwise cosine similarities; rejects zero vectors by index."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ConfigError(f"expected a 2-D batch of vectors, got shape {v.shape}")
    norms = np.linalg.norm(v, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise ValueError(f"degenerate vector at index {int(bad[0])}")
    unit = v / norms[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    sim = 0.5 * (sim + sim.T)
    return SimilarityMatrix(entries=sim)


def sparsity_profile(ac: AccumulatedScores) -> np.ndarray:
    """All heads' scores pooled and sorted ascending (attention-sparsity curve)."""
    if not ac.per_head:
        raise ConfigError("no scores to profile")
    return np.sort(np.concatenate(ac.per_head))


def similarity_census(vectors: np.ndarray, threshold: float) -> int:
    """Count unordered token pairs whose cosine similarity exceeds ``threshold``."""
    if not -1.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (-1, 1), got {threshold}")
    v = np.asarray(vectors, dtype=np.float64)
    if len(v) < 2:
        return 0
    sim = cosine_similarity_matrix(v).entries
    above = sim > threshold
    return int(np.triu(above, k=1).sum())

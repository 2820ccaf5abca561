"""Similarity-learned codebooks over normalized cache vectors.

Construction is greedy dominating-vertex selection on the merge graph: two
tokens are connected when the cosine similarity of their directions exceeds
the threshold.  Each round picks the vertex of highest degree (lowest index
on ties), appends its direction as a codebook entry, points every current
neighbour at that entry, and removes the closed neighbourhood from the
graph.  Every token therefore ends up referencing an entry it is
threshold-similar to, and entries are pairwise non-mergeable.

Keys are handled pre-rotation; reconstruction rescales the referenced entry
by the stored magnitude and, for keys, re-applies the rotary embedding at
the token's original position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import LayerCache, ModelConfig, rope_rows

__all__ = [
    "KEY",
    "VALUE",
    "Codebook",
    "TokenRefs",
    "MergeGraph",
    "CompressedHead",
    "CompressedLayer",
    "normalize",
    "build_codebook",
    "assign_or_extend",
    "reconstruct",
    "compress_layer",
]

KEY = "key"
VALUE = "value"


@dataclass
class Codebook:
    """Unit-direction entries for one (layer, key-or-value) pair.

    Mutable only through :func:`assign_or_extend`; a single writer per book.
    """

    kind: str
    entries: list[np.ndarray] = field(default_factory=list)
    threshold: float = 0.98

    def __post_init__(self) -> None:
        if self.kind not in (KEY, VALUE):
            raise ConfigError(f"codebook kind must be 'key' or 'value', got {self.kind!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        self.entries = [np.asarray(e, dtype=np.float64) for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def matrix(self) -> np.ndarray:
        return np.stack(self.entries, axis=0)


@dataclass
class TokenRefs:
    """Per-token entry index and original magnitude."""

    refs: list[int] = field(default_factory=list)
    magnitudes: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.refs)

    def refs_array(self) -> np.ndarray:
        return np.asarray(self.refs, dtype=np.int64)

    def magnitudes_array(self) -> np.ndarray:
        return np.asarray(self.magnitudes, dtype=np.float64)


@dataclass
class MergeGraph:
    """Adjacency of the threshold graph plus per-vertex degrees (self-loops
    included, so an isolated vertex has degree 1)."""

    adjacency: np.ndarray
    degrees: np.ndarray

    @classmethod
    def from_similarity(cls, sim: np.ndarray, threshold: float) -> "MergeGraph":
        adjacency = sim > threshold
        np.fill_diagonal(adjacency, True)
        return cls(adjacency=adjacency, degrees=adjacency.sum(axis=1).astype(np.int64))


def normalize(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split vectors into unit directions and L2 magnitudes.

    Raises on any zero vector, naming the first offending index.
    """
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ConfigError(f"expected a 2-D batch of vectors, got shape {v.shape}")
    mags = np.linalg.norm(v, axis=1)
    bad = np.flatnonzero(mags == 0.0)
    if bad.size:
        raise ValueError(f"zero vector at index {int(bad[0])} cannot be normalized")
    return v / mags[:, None], mags


def build_codebook(
    vectors: np.ndarray,
    threshold: float,
    kind: str = KEY,
) -> tuple[Codebook, TokenRefs]:
    """Greedy merge-graph codebook over a batch of vectors.

    Deterministic for a fixed input order; runs at most n rounds since every
    round removes at least the chosen vertex.
    """
    unit, mags = normalize(vectors)
    n = len(unit)
    if n == 0:
        raise ConfigError("cannot build a codebook from an empty batch")
    sim = unit @ unit.T
    graph = MergeGraph.from_similarity(sim, threshold)
    adjacency, degrees = graph.adjacency, graph.degrees

    alive = np.ones(n, dtype=bool)
    refs = np.full(n, -1, dtype=np.int64)
    entries: list[np.ndarray] = []
    while True:
        masked = np.where(alive, degrees, -1)
        pivot = int(np.argmax(masked))
        if masked[pivot] < 0:
            break
        members = np.flatnonzero(adjacency[pivot] & alive)
        entries.append(unit[pivot].copy())
        refs[members] = len(entries) - 1
        degrees = degrees - adjacency[:, members].sum(axis=1)
        alive[members] = False

    book = Codebook(kind=kind, entries=entries, threshold=threshold)
    return book, TokenRefs(refs=refs.tolist(), magnitudes=mags.tolist())


def assign_or_extend(vec: np.ndarray, book: Codebook, refs: TokenRefs) -> int:
    """Merge a new vector into the best-matching entry, or append it.

    The vector's magnitude and resulting reference are recorded in ``refs``.
    If several entries clear the threshold the most similar one wins (lowest
    index on exact ties); otherwise the normalized vector becomes a new
    entry.  Existing entries are never modified.
    """
    unit, mag = normalize(np.asarray(vec, dtype=np.float64)[None, :])
    unit, mag = unit[0], float(mag[0])
    ref = None
    if book.entries:
        sims = book.matrix() @ unit
        best = int(np.argmax(sims))
        if sims[best] > book.threshold:
            ref = best
    if ref is None:
        book.entries.append(unit)
        ref = len(book.entries) - 1
    refs.refs.append(ref)
    refs.magnitudes.append(mag)
    return ref


def reconstruct(
    book: Codebook,
    refs: TokenRefs,
    positions: np.ndarray | None,
    apply_rotary: bool,
    config: ModelConfig,
) -> np.ndarray:
    """Rebuild token vectors as magnitude * entry, optionally re-rotated.

    ``apply_rotary`` is for keys, which are stored pre-rotation; values are
    reconstructed as-is.  The rebuilt norm equals the stored magnitude
    (rotation is an isometry).
    """
    idx = refs.refs_array()
    if idx.size and (idx.min() < 0 or idx.max() >= len(book)):
        raise ValueError(
            f"corrupt references: index {int(idx.max() if idx.max() >= len(book) else idx.min())}"
            f" outside codebook of {len(book)} entries")
    if idx.size == 0:
        return np.empty((0, config.head_dim), dtype=np.float64)
    out = refs.magnitudes_array()[:, None] * book.matrix()[idx]
    if apply_rotary:
        if positions is None:
            raise ConfigError("positions are required to re-apply the rotary embedding")
        out = rope_rows(out, np.asarray(positions), config)
    return out


@dataclass(frozen=True)
class CompressedHead:
    """One head's replacement records: position, key/value refs and magnitudes."""

    positions: np.ndarray
    key_refs: np.ndarray
    key_mags: np.ndarray
    value_refs: np.ndarray
    value_mags: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.int64))
        object.__setattr__(self, "key_refs", np.asarray(self.key_refs, dtype=np.int64))
        object.__setattr__(self, "key_mags", np.asarray(self.key_mags, dtype=np.float64))
        object.__setattr__(self, "value_refs", np.asarray(self.value_refs, dtype=np.int64))
        object.__setattr__(self, "value_mags", np.asarray(self.value_mags, dtype=np.float64))
        n = len(self.positions)
        for name in ("key_refs", "key_mags", "value_refs", "value_mags"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} length does not match {n} positions")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class CompressedLayer:
    """One layer after replacement: two shared codebooks plus per-head records."""

    layer_index: int
    key_book: Codebook
    value_book: Codebook
    heads: tuple[CompressedHead, ...]
    is_unfolded: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "heads", tuple(self.heads))

    def token_records(self) -> int:
        return sum(len(h) for h in self.heads)


def compress_layer(
    layer: LayerCache,
    theta_key: float,
    theta_value: float,
) -> CompressedLayer:
    """Build one key and one value codebook shared by every head of a layer.

    All heads' keys are pooled into a single construction pass (likewise
    values), which is what lets unfolded GQA copies merge at cosine 1 and
    cost no extra entries.
    """
    counts = [len(h) for h in layer.heads]
    keys = np.concatenate([h.keys_pre_rope for h in layer.heads], axis=0)
    values = np.concatenate([h.values for h in layer.heads], axis=0)
    key_book, key_refs = build_codebook(keys, theta_key, kind=KEY)
    value_book, value_refs = build_codebook(values, theta_value, kind=VALUE)

    kr, km = key_refs.refs_array(), key_refs.magnitudes_array()
    vr, vm = value_refs.refs_array(), value_refs.magnitudes_array()
    heads = []
    offset = 0
    for head, n in zip(layer.heads, counts):
        sl = slice(offset, offset + n)
        heads.append(CompressedHead(
            positions=head.positions,
            key_refs=kr[sl], key_mags=km[sl],
            value_refs=vr[sl], value_mags=vm[sl],
        ))
        offset += n
    return CompressedLayer(
        layer_index=layer.layer_index,
        key_book=key_book,
        value_book=value_book,
        heads=tuple(heads),
        is_unfolded=layer.is_unfolded,
    )

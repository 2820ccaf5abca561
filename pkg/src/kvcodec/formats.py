"""Bit-exact binary formats plus CSV/JSON report writers.

Everything on disk is little-endian: u16/u32 counts, f32 tensor payloads,
f64 for plan scalars.  In memory all floats are f64.

Dump file (magic ``SPKV``)::

    magic[4] version:u16
    config: d,d_h,h,h_g,h_n,m,key_bit,int_bit (u32 each), rope_base (f64)
    per layer (m blocks):
        layer_index:u32 num_heads:u32 token_count:u32 window_len:u32
        per head: positions u32[t]; keys f32[t][d_h]; values f32[t][d_h]
        if window_len > 0: queries f32[h][window_len][d_h]   (h query heads)

Archive file (magic ``SPKC``)::

    magic[4] version:u16
    config (as above)
    theta_key:f64 theta_value:f64
    plan: r,r_c,beta,endpoint0,endpoint1 (f64 each),
          seq_len:u32 window_len:u32 num_layers:u32, per_layer f64[m]
    per layer (m blocks):
        layer_index:u32 num_heads:u32
        key book:   entries:u32, f32[entries][d_h]
        value book: entries:u32, f32[entries][d_h]
        per head: token_count:u32, records
            (position:u32 key_ref:u32 key_mag:f32 value_ref:u32 value_mag:f32)

Counts and framing are the documented header overhead; codebook vectors and
token records are the payload audited by the bit accounting.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .budget import BudgetPlan
from .codebook import Codebook, CompressedHead, CompressedLayer, KEY, VALUE
from .errors import FormatError
from .metrics import CompressionReport, exact_bits
from .model import HeadCache, LayerCache, ModelConfig

__all__ = [
    "DUMP_MAGIC",
    "ARCHIVE_MAGIC",
    "FORMAT_VERSION",
    "ARCHIVE_FLOAT_BITS",
    "ARCHIVE_INDEX_BITS",
    "CacheDump",
    "CompressedArchive",
    "read_dump",
    "write_dump",
    "read_archive",
    "write_archive",
    "archive_payload_bits",
    "archive_overhead_bits",
    "write_report_json",
    "write_report_csv",
    "write_census_csv",
    "write_profile_csv",
]

DUMP_MAGIC = b"SPKV"
ARCHIVE_MAGIC = b"SPKC"
FORMAT_VERSION = 1

ARCHIVE_FLOAT_BITS = 32
ARCHIVE_INDEX_BITS = 32

_CONFIG_STRUCT = struct.Struct("<8Id")
_RECORD_DTYPE = np.dtype([
    ("position", "<u4"),
    ("key_ref", "<u4"),
    ("key_mag", "<f4"),
    ("value_ref", "<u4"),
    ("value_mag", "<f4"),
])


@dataclass(frozen=True)
class CacheDump:
    """A raw multi-layer cache plus optional per-layer query windows."""

    config: ModelConfig
    layers: tuple[LayerCache, ...]
    query_windows: tuple[np.ndarray, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) != self.config.num_layers:
            raise FormatError(
                f"dump holds {len(self.layers)} layers, config says"
                f" {self.config.num_layers}")
        for layer in self.layers:
            if layer.head_dim != self.config.head_dim:
                raise FormatError(
                    f"layer {layer.layer_index} head_dim {layer.head_dim}"
                    f" != config head_dim {self.config.head_dim}")
        if self.query_windows is not None:
            windows = tuple(np.asarray(w, dtype=np.float64) for w in self.query_windows)
            object.__setattr__(self, "query_windows", windows)
            if len(windows) != len(self.layers):
                raise FormatError("one query window block required per layer")
            for w in windows:
                if w.ndim != 3 or w.shape[0] != self.config.num_q_heads \
                        or w.shape[2] != self.config.head_dim:
                    raise FormatError(
                        f"query window shape {w.shape} does not match"
                        f" ({self.config.num_q_heads}, window, {self.config.head_dim})")

    @property
    def window_len(self) -> int | None:
        if self.query_windows is None:
            return None
        return self.query_windows[0].shape[1]


@dataclass(frozen=True)
class CompressedArchive:
    """In-memory form of an archive file."""

    config: ModelConfig
    plan: BudgetPlan
    theta_key: float
    theta_value: float
    layers: tuple[CompressedLayer, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) != self.config.num_layers:
            raise FormatError(
                f"archive holds {len(self.layers)} layers, config says"
                f" {self.config.num_layers}")


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated payload while reading {what}")
    return data


def _write_config(fh: BinaryIO, config: ModelConfig) -> None:
    fh.write(_CONFIG_STRUCT.pack(
        config.hidden_dim, config.head_dim, config.num_q_heads,
        config.num_kv_heads, config.heads_per_group, config.num_layers,
        config.value_dtype_bits, config.index_bits, config.rope_base))


def _read_config(fh: BinaryIO) -> ModelConfig:
    d, d_h, h, h_g, h_n, m, kb, ib, base = _CONFIG_STRUCT.unpack(
        _read_exact(fh, _CONFIG_STRUCT.size, "model config"))
    return ModelConfig(
        hidden_dim=d, head_dim=d_h, num_q_heads=h, num_kv_heads=h_g,
        heads_per_group=h_n, num_layers=m, rope_base=base,
        value_dtype_bits=kb, index_bits=ib)


def _check_u32(values: np.ndarray, what: str) -> None:
    arr = np.asarray(values)
    if arr.size and (arr.min() < 0 or arr.max() >= 2 ** 32):
        raise FormatError(f"{what} does not fit in u32")


def _f32(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def _read_f32(fh: BinaryIO, shape: tuple[int, ...], what: str) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 0
    raw = _read_exact(fh, count * 4, what)
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def write_dump(dump: CacheDump, path: str | Path) -> None:
    """Serialize a raw cache; lossless for float32-representable data."""
    cfg = dump.config
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        _write_config(fh, cfg)
        for i, layer in enumerate(dump.layers):
            heads = len(layer.heads)
            if heads not in (cfg.num_kv_heads, cfg.num_q_heads):
                raise FormatError(
                    f"layer {layer.layer_index} holds {heads} heads; expected"
                    f" {cfg.num_kv_heads} or {cfg.num_q_heads}")
            count = layer.token_count()
            window = dump.query_windows[i].shape[1] if dump.query_windows is not None else 0
            fh.write(struct.pack("<4I", layer.layer_index, heads, count, window))
            for head in layer.heads:
                _check_u32(head.positions, "token position")
                fh.write(np.ascontiguousarray(head.positions, dtype="<u4").tobytes())
                fh.write(_f32(head.keys_pre_rope))
                fh.write(_f32(head.values))
            if window:
                fh.write(_f32(dump.query_windows[i]))


def read_dump(path: str | Path) -> CacheDump:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != DUMP_MAGIC:
            raise FormatError(f"bad magic {magic!r}: not a cache dump")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported dump version {version}")
        cfg = _read_config(fh)
        layers = []
        windows: list[np.ndarray] = []
        any_window = False
        for block in range(cfg.num_layers):
            idx, heads, count, window = struct.unpack(
                "<4I", _read_exact(fh, 16, f"layer {block} header"))
            if idx != block:
                raise FormatError(f"layer blocks out of order: got {idx}, expected {block}")
            if heads not in (cfg.num_kv_heads, cfg.num_q_heads):
                raise FormatError(
                    f"layer {idx} head count {heads} matches neither"
                    f" {cfg.num_kv_heads} KV heads nor {cfg.num_q_heads} query heads")
            head_caches = []
            for h in range(heads):
                raw = _read_exact(fh, count * 4, f"layer {idx} head {h} positions")
                positions = np.frombuffer(raw, dtype="<u4").astype(np.int64)
                keys = _read_f32(fh, (count, cfg.head_dim), f"layer {idx} head {h} keys")
                values = _read_f32(fh, (count, cfg.head_dim), f"layer {idx} head {h} values")
                head_caches.append(HeadCache(positions=positions,
                                             keys_pre_rope=keys, values=values))
            unfolded = heads == cfg.num_q_heads and cfg.num_q_heads != cfg.num_kv_heads
            layers.append(LayerCache(layer_index=idx, heads=tuple(head_caches),
                                     is_unfolded=unfolded))
            if window:
                any_window = True
                windows.append(_read_f32(
                    fh, (cfg.num_q_heads, window, cfg.head_dim),
                    f"layer {idx} query window"))
            else:
                windows.append(np.empty((cfg.num_q_heads, 0, cfg.head_dim)))
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after final layer block")
    if any_window and any(w.shape[1] == 0 for w in windows):
        raise FormatError("query windows must be present for all layers or none")
    return CacheDump(
        config=cfg,
        layers=tuple(layers),
        query_windows=tuple(windows) if any_window else None,
    )


def _write_book(fh: BinaryIO, book: Codebook, head_dim: int) -> None:
    fh.write(struct.pack("<I", len(book)))
    if len(book):
        matrix = book.matrix()
        if matrix.shape[1] != head_dim:
            raise FormatError(
                f"codebook entry width {matrix.shape[1]} != head_dim {head_dim}")
        fh.write(_f32(matrix))


def _read_book(fh: BinaryIO, kind: str, threshold: float,
               head_dim: int, what: str) -> Codebook:
    (count,) = struct.unpack("<I", _read_exact(fh, 4, f"{what} entry count"))
    entries = _read_f32(fh, (count, head_dim), f"{what} entries")
    return Codebook(kind=kind, entries=list(entries), threshold=threshold)


def write_archive(archive: CompressedArchive, path: str | Path) -> None:
    cfg = archive.config
    plan = archive.plan
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        _write_config(fh, cfg)
        fh.write(struct.pack("<2d", archive.theta_key, archive.theta_value))
        fh.write(struct.pack(
            "<5d", plan.global_ratio, plan.context_ratio, plan.min_ratio,
            plan.endpoints[0], plan.endpoints[1]))
        fh.write(struct.pack("<3I", plan.seq_len, plan.window_len, plan.num_layers))
        fh.write(np.asarray(plan.per_layer, dtype="<f8").tobytes())
        for layer in archive.layers:
            fh.write(struct.pack("<2I", layer.layer_index, len(layer.heads)))
            _write_book(fh, layer.key_book, cfg.head_dim)
            _write_book(fh, layer.value_book, cfg.head_dim)
            for head in layer.heads:
                fh.write(struct.pack("<I", len(head)))
                records = np.empty(len(head), dtype=_RECORD_DTYPE)
                _check_u32(head.positions, "token position")
                _check_u32(head.key_refs, "key reference")
                _check_u32(head.value_refs, "value reference")
                records["position"] = head.positions
                records["key_ref"] = head.key_refs
                records["key_mag"] = head.key_mags
                records["value_ref"] = head.value_refs
                records["value_mag"] = head.value_mags
                fh.write(records.tobytes())


def read_archive(path: str | Path) -> CompressedArchive:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != ARCHIVE_MAGIC:
            raise FormatError(f"bad magic {magic!r}: not a compressed archive")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported archive version {version}")
        cfg = _read_config(fh)
        theta_key, theta_value = struct.unpack("<2d", _read_exact(fh, 16, "thresholds"))
        r, r_c, beta, e0, e1 = struct.unpack("<5d", _read_exact(fh, 40, "budget plan"))
        seq_len, window_len, m = struct.unpack("<3I", _read_exact(fh, 12, "plan counts"))
        per_layer = np.frombuffer(
            _read_exact(fh, 8 * m, "per-layer ratios"), dtype="<f8")
        plan = BudgetPlan(
            global_ratio=r, context_ratio=r_c, endpoints=(e0, e1),
            per_layer=tuple(float(x) for x in per_layer),
            min_ratio=beta, seq_len=seq_len, window_len=window_len)
        layers = []
        for block in range(cfg.num_layers):
            idx, heads = struct.unpack("<2I", _read_exact(fh, 8, f"layer {block} header"))
            if idx != block:
                raise FormatError(f"layer blocks out of order: got {idx}, expected {block}")
            if heads not in (cfg.num_kv_heads, cfg.num_q_heads):
                raise FormatError(
                    f"layer {idx} head count {heads} matches neither"
                    f" {cfg.num_kv_heads} KV heads nor {cfg.num_q_heads} query heads")
            key_book = _read_book(fh, KEY, theta_key, cfg.head_dim, f"layer {idx} key book")
            value_book = _read_book(
                fh, VALUE, theta_value, cfg.head_dim, f"layer {idx} value book")
            head_records = []
            for h in range(heads):
                (count,) = struct.unpack(
                    "<I", _read_exact(fh, 4, f"layer {idx} head {h} token count"))
                raw = _read_exact(
                    fh, count * _RECORD_DTYPE.itemsize, f"layer {idx} head {h} records")
                records = np.frombuffer(raw, dtype=_RECORD_DTYPE)
                key_refs = records["key_ref"].astype(np.int64)
                value_refs = records["value_ref"].astype(np.int64)
                if key_refs.size and key_refs.max() >= len(key_book):
                    raise FormatError("corrupt archive: reference out of range")
                if value_refs.size and value_refs.max() >= len(value_book):
                    raise FormatError("corrupt archive: reference out of range")
                key_mags = records["key_mag"].astype(np.float64)
                value_mags = records["value_mag"].astype(np.float64)
                if (key_mags.size and key_mags.min() <= 0) or \
                        (value_mags.size and value_mags.min() <= 0):
                    raise FormatError("corrupt archive: non-positive magnitude")
                head_records.append(CompressedHead(
                    positions=records["position"].astype(np.int64),
                    key_refs=key_refs, key_mags=key_mags,
                    value_refs=value_refs, value_mags=value_mags))
            unfolded = heads == cfg.num_q_heads and cfg.num_q_heads != cfg.num_kv_heads
            layers.append(CompressedLayer(
                layer_index=idx, key_book=key_book, value_book=value_book,
                heads=tuple(head_records), is_unfolded=unfolded))
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after final layer block")
    return CompressedArchive(
        config=cfg, plan=plan, theta_key=theta_key, theta_value=theta_value,
        layers=tuple(layers))


def archive_payload_bits(archive: CompressedArchive) -> int:
    """Payload bits of the file as written: codebook vectors plus token
    records at the format's physical widths."""
    _, payload = exact_bits(
        list(archive.layers), archive.config, archive.plan.seq_len,
        float_bits=ARCHIVE_FLOAT_BITS, index_bits=ARCHIVE_INDEX_BITS)
    return payload


def archive_overhead_bits(archive: CompressedArchive) -> int:
    """Framing/header bits of the file as written (everything non-payload)."""
    m = archive.config.num_layers
    header = 4 + 2 + _CONFIG_STRUCT.size + 16            # magic, version, config, thetas
    header += 40 + 12 + 8 * archive.plan.num_layers      # plan scalars, counts, ratios
    per_layer = sum(
        8 + 4 + 4 + 4 * len(layer.heads)                 # indices + book/token counts
        for layer in archive.layers)
    return (header + per_layer) * 8


def write_report_json(report: CompressionReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report_csv(report: CompressionReport, path: str | Path) -> None:
    """One row per layer: index, ratio factors, counts, exact bits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "layer", "r1", "r2", "r3", "r3_conjectured", "r_layer",
            "r_layer_conjectured", "original_vectors", "retained_vectors",
            "codebook_entries", "exact_bits_original", "exact_bits_compressed",
        ])
        for lr, bits in zip(report.per_layer, report.per_layer_bits):
            writer.writerow([
                lr.layer_index, repr(lr.r1), repr(lr.r2), repr(lr.r3),
                repr(lr.r3_conjectured), repr(lr.r_layer),
                repr(lr.r_layer_conjectured), lr.original_vectors,
                lr.retained_vectors, lr.codebook_entries, bits[0], bits[1],
            ])


def write_census_csv(rows: Sequence[dict], path: str | Path) -> None:
    """Rows of {layer, kind, head, pairs_above, total_pairs, threshold}."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "kind", "head", "pairs_above", "total_pairs", "threshold"])
        for row in rows:
            writer.writerow([
                row["layer"], row["kind"], row["head"], row["pairs_above"],
                row["total_pairs"], repr(row["threshold"]),
            ])


def write_profile_csv(profiles: Sequence[tuple[int, np.ndarray]], path: str | Path) -> None:
    """Sorted accumulated-score profile per layer, one (layer, rank, score) row each."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "rank", "score"])
        for layer, profile in profiles:
            for rank, score in enumerate(profile):
                writer.writerow([layer, rank, repr(float(score))])

"""Command-line surface: compress, reconstruct, census, simulate, synth."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import eviction as ev
from .errors import KVCodecError
from .formats import (archive_overhead_bits, archive_payload_bits, read_archive,
                      read_dump, write_archive, write_census_csv, write_dump,
                      write_profile_csv, write_report_csv, write_report_json)
from .model import ModelConfig
from .pipeline import RunConfig, compress_dump, layer_attention, reconstruct_dump
from .scoring import accumulated_scores, similarity_census, sparsity_profile
from .simulate import (SyntheticSpec, generate_synthetic, simulate_decode,
                       write_fidelity_csv, write_fidelity_json)

_RUN_FIELDS = {f.name for f in fields(RunConfig)}


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file of run settings; explicit flags win")
    parser.add_argument("-r", "--reserve-ratio", type=float, default=None,
                        help="global KV reserve ratio in (0, 1]")
    parser.add_argument("--window", type=int, default=None, dest="window_len",
                        help="observation window length (default 8)")
    parser.add_argument("--theta-key", type=float, default=None)
    parser.add_argument("--theta-value", type=float, default=None)
    parser.add_argument("--beta", type=float, default=None, dest="min_layer_ratio",
                        help="minimum per-layer context ratio (default 0.05)")
    parser.add_argument("--gqa-mode", choices=[ev.PER_HEAD_UNFOLDED, ev.GROUP_AVERAGED],
                        default=None)
    parser.add_argument("--strict-paper", action="store_true", default=None,
                        help="use the published endpoint formula verbatim")
    parser.add_argument("--uniform-fallback", action="store_true", default=None,
                        help="flat allocation instead of failing when r_c <= beta")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)


def _run_config(args: argparse.Namespace) -> RunConfig:
    settings: dict = {}
    if args.config is not None:
        loaded = json.loads(Path(args.config).read_text())
        unknown = set(loaded) - _RUN_FIELDS
        if unknown:
            raise KVCodecError(f"unknown config keys: {sorted(unknown)}")
        settings.update(loaded)
    rename = {"reserve_ratio": "reserve_ratio"}
    for field in _RUN_FIELDS:
        flag = getattr(args, rename.get(field, field), None)
        if flag is not None:
            settings[field] = flag
    return RunConfig(**settings)


def _cmd_compress(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    dump = read_dump(args.dump)
    archive, report = compress_dump(dump, cfg)
    write_archive(archive, args.archive)
    size_bits = Path(args.archive).stat().st_size * 8
    expected = archive_payload_bits(archive) + archive_overhead_bits(archive)
    if size_bits != expected:
        raise KVCodecError(
            f"archive audit failed: {size_bits} bits on disk, {expected} accounted")
    if args.report:
        write_report_json(report, args.report)
    if args.report_csv:
        write_report_csv(report, args.report_csv)
    print(f"compressed {args.dump} -> {args.archive}: "
          f"r={report.aggregate:.4f} exact_ratio={report.exact_ratio:.4f}")
    return 0


def _cmd_reconstruct(args: argparse.Namespace) -> int:
    archive = read_archive(args.archive)
    dump = reconstruct_dump(archive, apply_rotary=args.apply_rope)
    write_dump(dump, args.out)
    print(f"reconstructed {args.archive} -> {args.out}")
    return 0


def _cmd_census(args: argparse.Namespace) -> int:
    dump = read_dump(args.dump)
    rows = []
    for layer in dump.layers:
        n = layer.token_count()
        total = n * (n - 1) // 2
        for h, head in enumerate(layer.heads):
            rows.append({
                "layer": layer.layer_index, "kind": "key", "head": h,
                "pairs_above": similarity_census(head.keys_pre_rope, args.theta_key),
                "total_pairs": total, "threshold": args.theta_key,
            })
            rows.append({
                "layer": layer.layer_index, "kind": "value", "head": h,
                "pairs_above": similarity_census(head.values, args.theta_value),
                "total_pairs": total, "threshold": args.theta_value,
            })
    write_census_csv(rows, args.census_csv)
    written = [str(args.census_csv)]
    if args.profile_csv:
        if dump.query_windows is None:
            raise KVCodecError(
                "dump has no query windows; the sparsity profile needs them")
        profiles = []
        for i, layer in enumerate(dump.layers):
            attn = layer_attention(layer, dump.query_windows[i], dump.config)
            profiles.append((layer.layer_index,
                             sparsity_profile(accumulated_scores(attn))))
        write_profile_csv(profiles, args.profile_csv)
        written.append(str(args.profile_csv))
    print(f"census written: {', '.join(written)}")
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    dump = read_dump(args.dump)
    result, _ = simulate_decode(dump, cfg, steps=args.steps, tolerance=args.tolerance)
    if args.json:
        write_fidelity_json(result, args.json)
    if args.csv:
        write_fidelity_csv(result, args.csv)
    verdict = {True: "pass", False: "FAIL", None: "n/a"}[result.passed]
    print(f"simulated {args.steps} steps: max_abs={result.max_abs:.3e} "
          f"rms={result.rms:.3e} bound={result.analytic_bound:.3e} [{verdict}]")
    return 0 if result.passed is not False else 1


def _cmd_synth(args: argparse.Namespace) -> int:
    if args.q_heads % args.kv_heads:
        raise KVCodecError(
            f"query heads ({args.q_heads}) must be a multiple of KV heads"
            f" ({args.kv_heads})")
    config = ModelConfig(
        hidden_dim=args.q_heads * args.head_dim,
        head_dim=args.head_dim,
        num_q_heads=args.q_heads,
        num_kv_heads=args.kv_heads,
        heads_per_group=args.q_heads // args.kv_heads,
        num_layers=args.layers,
        rope_base=args.rope_base,
    )
    spec = SyntheticSpec(
        num_clusters=args.clusters,
        within_cluster_min_cos=args.within,
        cross_cluster_max_cos=args.cross,
        tokens_per_cluster=args.tokens_per_cluster,
        magnitude_range=(args.mag_lo, args.mag_hi),
        seed=args.seed,
    )
    dump = generate_synthetic(spec, config, args.seq_len, args.window)
    write_dump(dump, args.out)
    kind = f"{args.clusters} clusters" if args.clusters else "random"
    print(f"synthetic dump ({kind}, l={args.seq_len}) -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvcodec",
        description="KV-cache compression: score-driven eviction plus "
                    "similarity-learned codebooks over raw K/V dumps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="dump -> archive + report")
    p.add_argument("dump", type=Path)
    p.add_argument("-o", "--archive", type=Path, required=True)
    p.add_argument("--report", type=Path, default=None, help="report JSON path")
    p.add_argument("--report-csv", type=Path, default=None)
    _add_run_flags(p)
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("reconstruct", help="archive -> dump")
    p.add_argument("archive", type=Path)
    p.add_argument("-o", "--out", type=Path, required=True)
    p.add_argument("--apply-rope", action="store_true",
                   help="bake the rotary embedding into reconstructed keys")
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("census", help="similarity census and sparsity profile CSVs")
    p.add_argument("dump", type=Path)
    p.add_argument("--theta-key", type=float, default=0.9,
                   help="census threshold for keys (default 0.9)")
    p.add_argument("--theta-value", type=float, default=0.6,
                   help="census threshold for values (default 0.6)")
    p.add_argument("--census-csv", type=Path, required=True)
    p.add_argument("--profile-csv", type=Path, default=None)
    p.set_defaults(func=_cmd_census)

    p = sub.add_parser("simulate", help="fidelity of compressed vs full attention")
    p.add_argument("dump", type=Path)
    p.add_argument("--steps", type=int, default=0, help="decode steps to append")
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--json", type=Path, default=None)
    p.add_argument("--csv", type=Path, default=None)
    _add_run_flags(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("synth", help="generate a synthetic dump")
    p.add_argument("-o", "--out", type=Path, required=True)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--q-heads", type=int, default=8)
    p.add_argument("--kv-heads", type=int, default=8)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--seq-len", type=int, default=256)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--rope-base", type=float, default=10000.0)
    p.add_argument("--clusters", type=int, default=0,
                   help="0 for unstructured random vectors")
    p.add_argument("--within", type=float, default=0.95,
                   help="within-cluster minimum cosine")
    p.add_argument("--cross", type=float, default=0.5,
                   help="cross-cluster maximum cosine")
    p.add_argument("--tokens-per-cluster", type=int, default=None)
    p.add_argument("--mag-lo", type=float, default=0.5)
    p.add_argument("--mag-hi", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (KVCodecError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point wiring tensor I/O, the page codec, the cache
runtime and the analysis experiments into reproducible runs.

Exit codes: 0 success, 1 validation failure, 2 I/O failure, 3 property-check
failure.  Every command is deterministic given its flags and echoes its
fully-resolved configuration (defaults included) into the output header.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from ._version import __version__
from .analysis import (
    boost_sweep_experiment,
    channel_sensitivity,
    measure_cache_bytes,
    memory_report,
    memory_summary,
    report_header,
    sensitivity_csv_rows,
    sweep_csv_rows,
    write_csv,
)
from .cache import KittyCacheState, _RowStore, oracle_attend
from .config import KittyConfig, config_from_mapping, read_config_file
from .errors import ConfigError, KittyError, TensorIOError
from .pages import dequantize_key_page, dequantize_value_page, pack_key_page, pack_value_page
from .quant import channel_scores, fake_quantize_matrix, select_boost
from .tensor_io import SyntheticSpec, generate_synthetic, read_tensor, write_tensor

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_CHECK = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the CLI contract reserves 2
    # for I/O failures, so route argument errors to the validation code
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.strip().split(","))


def _echo(lines) -> None:
    for line in lines:
        print(line)


# -- gen ----------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = SyntheticSpec(
        tokens=args.tokens,
        channels=args.channels,
        outlier_channels=_parse_int_list(args.outliers),
        outlier_gain=args.gain,
        base_std=args.std,
        seed=args.seed,
    )
    header = report_header(
        "gen",
        args.seed,
        {
            "tokens": spec.tokens,
            "channels": spec.channels,
            "outliers": ",".join(map(str, spec.outlier_channels)),
            "gain": spec.outlier_gain,
            "std": spec.base_std,
            "out": args.out,
        },
    )
    _echo(header)
    write_tensor(generate_synthetic(spec), args.out)
    print(f"wrote: {args.out}")
    return EXIT_OK


# -- roundtrip ------------------------------------------------------------------


def cmd_roundtrip(args) -> int:
    if args.group < 4 or args.group % 4 != 0:
        raise ConfigError("--group must be a positive multiple of 4")
    keys = read_tensor(args.keys)
    tokens, d = keys.shape
    blocks = tokens // args.group
    header = report_header(
        "roundtrip",
        "-",
        {
            "keys": args.keys,
            "boost_fraction": args.boost_fraction,
            "group": args.group,
            "tokens": tokens,
            "channels": d,
            "blocks": blocks,
        },
    )
    _echo(header)

    max_err = 0.0
    exact = True
    for b in range(blocks):
        block = keys[b * args.group : (b + 1) * args.group]
        sel = select_boost(channel_scores(block), args.boost_fraction, "magnitude")
        widths = np.full(d, 2)
        widths[sel.boosted] = 4
        packed = dequantize_key_page(pack_key_page(block, sel)).T
        oracle = fake_quantize_matrix(block, "per_channel", widths)
        err = float(np.max(np.abs(packed - oracle))) if block.size else 0.0
        max_err = max(max_err, err)
        exact = exact and np.array_equal(packed, oracle)
        if d % 4 == 0:
            v_packed = dequantize_value_page(pack_value_page(block))
            v_oracle = fake_quantize_matrix(block, "per_token", np.full(args.group, 2))
            err = float(np.max(np.abs(v_packed - v_oracle))) if block.size else 0.0
            max_err = max(max_err, err)
            exact = exact and np.array_equal(v_packed, v_oracle)
    print(f"blocks: {blocks}")
    print(f"max_abs_error: {max_err:.10g}")
    print(f"bit_exact: {'yes' if exact else 'no'}")
    return EXIT_OK if exact else EXIT_CHECK


# -- sensitivity ----------------------------------------------------------------


def _split_heads(m: np.ndarray, heads: int, what: str) -> np.ndarray:
    if heads < 1 or m.shape[0] % heads != 0:
        raise ConfigError(f"{what}: {m.shape[0]} rows do not split into {heads} heads")
    return m.reshape(heads, m.shape[0] // heads, m.shape[1])


def cmd_sensitivity(args) -> int:
    keys = _split_heads(read_tensor(args.keys), args.kv_heads, "--keys")
    queries = _split_heads(read_tensor(args.queries), args.q_heads, "--queries")
    header = report_header(
        "sensitivity",
        "-",
        {
            "keys": args.keys,
            "queries": args.queries,
            "kv_heads": args.kv_heads,
            "q_heads": args.q_heads,
            "bits": args.bits,
            "out": args.out,
        },
    )
    _echo(header)
    report = channel_sensitivity(queries, keys, bits=args.bits)
    columns, rows = sensitivity_csv_rows(report)
    write_csv(args.out, header, columns, rows)
    top = ",".join(map(str, report.top_channels(8)))
    print(f"top_channels: {top}")
    print(f"wrote: {args.out}")
    return EXIT_OK


# -- sweep ----------------------------------------------------------------------


def cmd_sweep(args) -> int:
    fractions = _parse_float_list(args.fractions)
    heuristics = tuple(h.strip() for h in args.heuristics.split(","))
    header = report_header(
        "sweep",
        args.seed,
        {
            "fractions": args.fractions,
            "heuristics": args.heuristics,
            "seeds": args.seeds,
            "tokens": args.tokens,
            "channels": args.channels,
            "outliers": args.outliers,
            "gain": args.gain,
            "std": args.std,
            "query_tokens": args.query_tokens,
            "out": args.out,
        },
    )
    _echo(header)
    rows = boost_sweep_experiment(
        fractions,
        n_seeds=args.seeds,
        tokens=args.tokens,
        channels=args.channels,
        outlier_channels=_parse_int_list(args.outliers),
        outlier_gain=args.gain,
        base_std=args.std,
        query_tokens=args.query_tokens,
        heuristics=heuristics,
        seed=args.seed,
    )
    columns, data = sweep_csv_rows(rows)
    write_csv(args.out, header, columns, data)
    for row in rows:
        print(
            f"fraction {row.fraction:g} {row.heuristic}: "
            f"mse {row.mean_mse:.6e} (max dev {row.max_deviation:.2e}, n={row.runs})"
        )
    print(f"wrote: {args.out}")
    return EXIT_OK


# -- simulate-decode --------------------------------------------------------------


_CONFIG_FLAGS = {
    "s": "s",
    "r": "r",
    "g": "g",
    "d": "d",
    "kv_heads": "h_kv",
    "q_heads": "h_q",
    "key_bits": "key_bits",
    "value_bits": "value_bits",
    "boost_fraction": "boost_fraction",
    "heuristic": "heuristic",
    "heuristic_seed": "heuristic_seed",
}


def _resolve_config(args) -> KittyConfig:
    mapping = read_config_file(args.config) if args.config else {}
    cfg = config_from_mapping(mapping)
    overrides = {
        field: getattr(args, flag)
        for flag, field in _CONFIG_FLAGS.items()
        if getattr(args, flag, None) is not None
    }
    return config_from_mapping(overrides, base=cfg)


def cmd_simulate_decode(args) -> int:
    cfg = _resolve_config(args)
    if args.mode == "passthrough":
        cfg = config_from_mapping({"key_bits": 16, "value_bits": 16}, base=cfg)
    if args.prompt_len < 0 or args.decode_steps < 1:
        raise ConfigError("--prompt-len must be >= 0 and --decode-steps >= 1")
    header = report_header(
        "simulate-decode",
        args.seed,
        dict(
            cfg.as_mapping(),
            mode=args.mode,
            prompt_len=args.prompt_len,
            decode_steps=args.decode_steps,
            out=args.out,
        ),
    )
    _echo(header)

    rng = np.random.default_rng(args.seed)

    def draw():
        k = rng.standard_normal((cfg.h_kv, cfg.d)).astype(np.float32)
        v = rng.standard_normal((cfg.h_kv, cfg.d)).astype(np.float32)
        q = rng.standard_normal((cfg.h_q, cfg.d)).astype(np.float32)
        return k, v, q

    columns = ["step", "qhead"] + [f"o{i}" for i in range(cfg.d)]
    rows = []
    if args.mode == "oracle":
        k_hist = [_RowStore(cfg.d, 64) for _ in range(cfg.h_kv)]
        v_hist = [_RowStore(cfg.d, 64) for _ in range(cfg.h_kv)]

        def insert(k, v):
            for h in range(cfg.h_kv):
                k_hist[h].append(k[h])
                v_hist[h].append(v[h])

        for _ in range(args.prompt_len):
            k, v, _ = draw()
            insert(k, v)
        kv_map = [cfg.kv_head_of(i) for i in range(cfg.h_q)]
        for step in range(1, args.decode_steps + 1):
            k, v, q = draw()
            insert(k, v)
            keys = np.stack([s.view() for s in k_hist])
            values = np.stack([s.view() for s in v_hist])
            out = oracle_attend(keys, values, q, kv_head_map=kv_map)
            for h in range(cfg.h_q):
                rows.append([step, h, *map(float, out.outputs[h])])
        total = args.prompt_len + args.decode_steps
        print(f"total_tokens: {total}")
    else:
        state = KittyCacheState(cfg)
        for _ in range(args.prompt_len):
            k, v, _ = draw()
            state.insert_token(k, v)
        packs_before = (state.key_pack_events, state.value_pack_events)
        for step in range(1, args.decode_steps + 1):
            k, v, q = draw()
            state.insert_token(k, v)
            out = state.attend(q)
            for h in range(cfg.h_q):
                rows.append([step, h, *map(float, out.outputs[h])])
        bound = -(-args.decode_steps // cfg.g) + 1
        print(f"total_tokens: {state.total_tokens}")
        print(f"key_pack_events: {state.key_pack_events}")
        print(f"value_pack_events: {state.value_pack_events}")
        print(f"decode_key_pack_events: {state.key_pack_events - packs_before[0]}")
        print(f"decode_value_pack_events: {state.value_pack_events - packs_before[1]}")
        print(f"pack_event_bound: {bound}")
        for line in memory_summary(measure_cache_bytes(state)):
            print(line)

    write_csv(args.out, header, columns, rows)
    print(f"wrote: {args.out}")
    return EXIT_OK


# -- mem-report -------------------------------------------------------------------


def cmd_mem_report(args) -> int:
    cfg = _resolve_config(args)
    if args.length < 0:
        raise ConfigError("--length must be >= 0")
    header = report_header("mem-report", "-", dict(cfg.as_mapping(), length=args.length))
    _echo(header)
    report = memory_report(cfg, args.length)
    lines = memory_summary(report)
    for line in lines:
        print(line)
    if args.out:
        columns = ["field", "value"]
        rows = [line.split(": ", 1) for line in lines]
        write_csv(args.out, header, columns, rows)
        print(f"wrote: {args.out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def _add_config_flags(sub) -> None:
    sub.add_argument("--config", default=None, help="flat key = value config file")
    sub.add_argument("--s", type=int, default=None, help="sink size override")
    sub.add_argument("--r", type=int, default=None, help="local window override")
    sub.add_argument("--g", type=int, default=None, help="group/page size override")
    sub.add_argument("--d", type=int, default=None, help="head size override")
    sub.add_argument("--kv-heads", dest="kv_heads", type=int, default=None)
    sub.add_argument("--q-heads", dest="q_heads", type=int, default=None)
    sub.add_argument("--key-bits", dest="key_bits", type=int, default=None)
    sub.add_argument("--value-bits", dest="value_bits", type=int, default=None)
    sub.add_argument("--boost-fraction", dest="boost_fraction", type=float, default=None)
    sub.add_argument("--heuristic", choices=("magnitude", "random"), default=None)
    sub.add_argument("--heuristic-seed", dest="heuristic_seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kittykv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kittykv {__version__}")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = subs.add_parser("gen", help="generate a synthetic KV tensor file")
    gen.add_argument("--tokens", type=int, required=True)
    gen.add_argument("--channels", type=int, required=True)
    gen.add_argument("--outliers", default="", help="comma-separated channel indices")
    gen.add_argument("--gain", type=float, default=1.0)
    gen.add_argument("--std", type=float, default=1.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)

    rt = subs.add_parser("roundtrip", help="pack/dequantize pages and compare to the oracle")
    rt.add_argument("--keys", required=True)
    rt.add_argument("--boost-fraction", dest="boost_fraction", type=float, default=0.125)
    rt.add_argument("--group", type=int, default=128)
    rt.set_defaults(func=cmd_roundtrip)

    sens = subs.add_parser("sensitivity", help="per-channel quantization sensitivity")
    sens.add_argument("--keys", required=True)
    sens.add_argument("--queries", required=True)
    sens.add_argument("--kv-heads", dest="kv_heads", type=int, default=1)
    sens.add_argument("--q-heads", dest="q_heads", type=int, default=1)
    sens.add_argument("--bits", type=int, choices=(2, 4, 16), default=2)
    sens.add_argument("--out", required=True)
    sens.set_defaults(func=cmd_sensitivity)

    sweep = subs.add_parser("sweep", help="boost-rate sweep on synthetic tensors")
    sweep.add_argument("--fractions", default="0,0.125,0.25,0.5,1.0")
    sweep.add_argument("--heuristics", default="magnitude,random")
    sweep.add_argument("--seeds", type=int, default=20)
    sweep.add_argument("--tokens", type=int, default=1024)
    sweep.add_argument("--channels", type=int, default=128)
    sweep.add_argument("--outliers", default="3,17")
    sweep.add_argument("--gain", type=float, default=8.0)
    sweep.add_argument("--std", type=float, default=1.0)
    sweep.add_argument("--query-tokens", dest="query_tokens", type=int, default=64)
    sweep.add_argument("--seed", type=int, default=0)
    sweep.add_argument("--out", required=True)
    sweep.set_defaults(func=cmd_sweep)

    sim = subs.add_parser("simulate-decode", help="run the decode pipeline end to end")
    _add_config_flags(sim)
    sim.add_argument("--prompt-len", dest="prompt_len", type=int, default=0)
    sim.add_argument("--decode-steps", dest="decode_steps", type=int, required=True)
    sim.add_argument("--mode", choices=("kitty", "passthrough", "oracle"), default="kitty")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate_decode)

    mem = subs.add_parser("mem-report", help="closed-form memory accounting")
    _add_config_flags(mem)
    mem.add_argument("--length", type=int, required=True)
    mem.add_argument("--out", default=None)
    mem.set_defaults(func=cmd_mem_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse --help/--version or flag errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except TensorIOError as exc:
        print(f"kittykv: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"kittykv: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except KittyError as exc:
        print(f"kittykv: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

"""``hipattn`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical
invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

import numpy as np

from .bench import BenchReport, InvariantViolation, compare_masks, make_instance, report_row, run_bench
from .config import ConfigError, HipConfig, config_from_dict
from .decode import decode_run, new_synthetic_model
from .mask import OpCounters, estimate_block_mask
from .sparse import sparse_attention, union_effective_mask
from .tensors import gen_random, read_tensor, write_tensor

log = logging.getLogger("hipattn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="base random seed")
    p.add_argument("--config", default=d(None), help="JSON config (HipConfig keys, plus bench sweep keys)")
    p.add_argument("--out", default=d(None), help="output path (stdout when omitted, where applicable)")
    p.add_argument("--threads", type=int, default=d(1), help="worker threads for sweeps")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hipattn", description="Hierarchically pruned attention toolkit")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        _add_globals(p, suppress=True)
        return p

    g = cmd("gen", "write a random tensor file")
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--cols", type=int, required=True)
    g.add_argument("--dist", choices=["gaussian", "planted_needle"], default="gaussian")
    g.add_argument("--needles", default="", help="comma-separated needle rows")
    g.add_argument("--magnitude", type=float, default=10.0)

    m = cmd("mask", "estimate a block mask and print it")
    m.add_argument("--q", required=True)
    m.add_argument("--k", dest="keys", required=True)
    m.add_argument("--causal", action=argparse.BooleanOptionalAction, default=True)

    a = cmd("attn", "run estimation, sink/window union and sparse attention")
    a.add_argument("--q", required=True)
    a.add_argument("--k", dest="keys", required=True)
    a.add_argument("--v", required=True)
    a.add_argument("--causal", action=argparse.BooleanOptionalAction, default=True)

    dcd = cmd("decode", "simulate decoding with mask caching")
    dcd.add_argument("--prompt", help="prompt tensor file (T x d)")
    dcd.add_argument("--prompt-len", type=int, default=64)
    dcd.add_argument("--d", type=int, default=32)
    dcd.add_argument("--layers", type=int, default=4)
    dcd.add_argument("--steps", type=int, default=16)

    cmd("bench", "run a sweep described by --config and write a CSV report")

    c = cmd("compare", "mask-quality table for all methods")
    c.add_argument("--q")
    c.add_argument("--k", dest="keys")
    c.add_argument("--T", type=int, default=1024)
    c.add_argument("--d", type=int, default=64)
    c.add_argument("--instances", type=int, default=1)
    c.add_argument("--causal", action=argparse.BooleanOptionalAction, default=True)
    return parser


def _load_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


def _hip_config(args) -> HipConfig:
    return config_from_dict(_load_json(args.config), strict=False)


def _emit(text: str, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _cmd_gen(args) -> int:
    if args.out is None:
        raise UsageError("gen needs --out")
    needles = [int(x) for x in args.needles.split(",") if x.strip()]
    try:
        t = gen_random(args.rows, args.cols, args.seed, args.dist, needles, args.magnitude)
    except (ValueError, IndexError) as exc:
        raise UsageError(str(exc)) from exc
    write_tensor(t, args.out)
    return 0


def _cmd_mask(args) -> int:
    cfg = _hip_config(args)
    Q, K = read_tensor(args.q), read_tensor(args.keys)
    ctr = OpCounters()
    mask = estimate_block_mask(Q, K, cfg, args.causal, ctr)
    _emit(mask.to_text(), args.out)
    log.info("counters %s", ctr.as_dict())
    return 0


def _cmd_attn(args) -> int:
    if args.out is None:
        raise UsageError("attn needs --out")
    cfg = _hip_config(args)
    Q, K, V = read_tensor(args.q), read_tensor(args.keys), read_tensor(args.v)
    ctr = OpCounters()
    mask = estimate_block_mask(Q, K, cfg, args.causal, ctr)
    eff = union_effective_mask(mask, cfg.sink_size, cfg.window_size)
    out = sparse_attention(Q, K, V, eff, ctr)
    if not np.all(np.isfinite(out)):
        raise InvariantViolation("attention output is not finite")
    write_tensor(out, args.out)
    sys.stdout.write(json.dumps(ctr.as_dict(), sort_keys=True) + "\n")
    return 0


def _cmd_decode(args) -> int:
    cfg = _hip_config(args)
    if args.prompt:
        prompt = read_tensor(args.prompt)
    else:
        prompt = gen_random(args.prompt_len, args.d, args.seed)
    model = new_synthetic_model(args.layers, prompt.shape[1], args.seed)
    trace = decode_run(model, prompt, args.steps, cfg)
    for r in trace.records:
        if not np.all(np.isfinite(r.output)):
            raise InvariantViolation(f"non-finite hidden state at step {r.step}, layer {r.layer}")
    _emit(trace.to_jsonl(), args.out)
    return 0


def _cmd_bench(args) -> int:
    if args.config is None:
        raise UsageError("bench needs --config")
    conf = _load_json(args.config)
    conf.setdefault("seed", args.seed)
    report = run_bench(conf, threads=args.threads)
    _emit(report.to_csv(), args.out)
    return 0


def _cmd_compare(args) -> int:
    cfg = _hip_config(args)
    if (args.q is None) != (args.keys is None):
        raise UsageError("compare needs both --q and --k, or neither")
    if args.q:
        instances = [(read_tensor(args.q), read_tensor(args.keys))]
    else:
        instances = [make_instance(args.T, args.d, args.seed, i)[:2] for i in range(args.instances)]
    acc: dict = {}
    for i, (Q, K) in enumerate(instances):
        for r in compare_masks(Q, K, cfg, causal=args.causal, seed=args.seed + i):
            acc.setdefault(r["method"], []).append(r)
    rows = []
    for method, rs in acc.items():
        ctr = OpCounters()
        for r in rs:
            ctr += r["counters"]
        metrics = (float(np.mean([r["mean_recall"] for r in rs])), float(np.mean([r["mean_mass"] for r in rs])))
        rows.append(report_row(instances[0][0].shape[0], cfg, method, metrics, ctr))
    _emit(BenchReport({"seed": args.seed}, rows).to_csv(), args.out)
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "mask": _cmd_mask,
    "attn": _cmd_attn,
    "decode": _cmd_decode,
    "bench": _cmd_bench,
    "compare": _cmd_compare,
}


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return _COMMANDS[args.command](args)
    except (UsageError, ValueError, IndexError, OSError) as exc:
        print(f"hipattn: error: {exc}", file=sys.stderr)
        return 1
    except InvariantViolation as exc:
        print(f"hipattn: invariant violation: {exc}", file=sys.stderr)
        return 2

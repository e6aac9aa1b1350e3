"""Command-line entry point: simulate against the generative crowd, replay a
frozen pool, serve the live broker, or report on saved results.

Exit codes: 0 success, 2 config error, 3 data error, 4 pool/dataset mismatch,
5 bind failure.
"""

from __future__ import annotations

import argparse
import os
import socket
import sys

from . import __version__
from .config import ConfigError, build_run_config, parse_config_file
from .crf import save_model
from .environment import load_frozen_pool
from .harness import (
    ParseError,
    compute_metrics,
    export_results,
    load_episode_records,
    load_sequence_dataset,
    run_stream,
    summary_lines,
)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_POOL = 4
EXIT_BIND = 5

CONFIG_ENV_VAR = "OTJ_CONFIG"


def _fail(code: int, message: str) -> int:
    print("otj: error: %s" % message, file=sys.stderr)
    return code


def _load_config(args, overrides):
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV_VAR)
    mapping = parse_config_file(path) if path else {}
    return build_run_config(mapping, overrides)


def _load_dataset(args):
    if not args.data:
        raise ParseError("--data is required")
    return load_sequence_dataset(args.data)


def _print_summary(summary, extra=None):
    for line in summary_lines(summary):
        key, _, value = line.partition("=")
        print("%-28s %s" % (key, value))
    for key, value in (extra or []):
        print("%-28s %s" % (key, value))


def cmd_simulate(args) -> int:
    try:
        cfg = _load_config(args, {"policy": args.policy, "seed": args.seed,
                                  "out_dir": args.out})
    except (ConfigError, OSError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    try:
        dataset = _load_dataset(args)
    except (ParseError, OSError) as exc:
        return _fail(EXIT_DATA, str(exc))
    records, model = run_stream(dataset, cfg)
    summary = compute_metrics(records, dataset, window=cfg.window,
                              background=cfg.background_label)
    if cfg.out_dir:
        export_results(records, summary, cfg.out_dir)
    if args.save_model:
        save_model(model, args.save_model)
    _print_summary(summary)
    return 0


def cmd_replay(args) -> int:
    try:
        cfg = _load_config(args, {"policy": args.policy, "seed": args.seed,
                                  "out_dir": args.out})
    except (ConfigError, OSError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    try:
        dataset = _load_dataset(args)
    except (ParseError, OSError) as exc:
        return _fail(EXIT_DATA, str(exc))
    if not args.pool:
        return _fail(EXIT_POOL, "--pool is required")
    try:
        pool = load_frozen_pool(args.pool, dataset.label_set)
    except OSError as exc:
        return _fail(EXIT_DATA, str(exc))
    except ValueError as exc:
        return _fail(EXIT_POOL, str(exc))
    known_ids = {"ex%05d" % i for i in range(len(dataset.examples))}
    alien = sorted(pool.example_ids() - known_ids)
    if alien:
        return _fail(EXIT_POOL, "pool references unknown example ids: %s" % ", ".join(alien[:5]))
    records, model = run_stream(dataset, cfg, pool=pool)
    summary = compute_metrics(records, dataset, window=cfg.window,
                              background=cfg.background_label)
    exhausted = sum(1 for r in records if r.pool_exhausted)
    extra = [("pool_exhausted_episodes", str(exhausted))]
    if cfg.out_dir:
        export_results(records, summary, cfg.out_dir, extra=extra)
    if args.save_model:
        save_model(model, args.save_model)
    _print_summary(summary, extra=extra)
    return 0


def cmd_serve(args) -> int:
    try:
        cfg = _load_config(args, {"policy": args.policy, "seed": args.seed,
                                  "out_dir": args.out})
    except (ConfigError, OSError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    try:
        dataset = _load_dataset(args)
    except (ParseError, OSError) as exc:
        return _fail(EXIT_DATA, str(exc))
    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        probe.bind((args.host, args.port))
    except OSError as exc:
        return _fail(EXIT_BIND, "cannot bind %s:%d: %s" % (args.host, args.port, exc))
    finally:
        probe.close()

    import uvicorn

    from .service import build_app

    app = build_app(dataset, cfg, token=args.token)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_report(args) -> int:
    try:
        dataset = _load_dataset(args)
        records = load_episode_records(args.episodes)
    except (ParseError, OSError, ValueError) as exc:
        return _fail(EXIT_DATA, str(exc))
    if not records:
        return _fail(EXIT_DATA, "no episode records in %s" % args.episodes)
    summary = compute_metrics(records, dataset, window=args.window,
                              background=args.background)
    if args.out:
        export_results(records, summary, args.out)
    _print_summary(summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otj",
        description="On-the-job learning engine: stream predictions, query a "
                    "crowd when uncertain, learn from the answers.")
    parser.add_argument("--version", action="version",
                        version="otj %s" % __version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, pool=False):
        p.add_argument("--data", help="dataset file (token<TAB>label lines)")
        p.add_argument("--policy", help="lense | threshold | nvote:<n> | online")
        p.add_argument("--config", help="key=value config file (default $%s)" % CONFIG_ENV_VAR)
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("--out", help="output directory for result files")
        p.add_argument("--save-model", help="write the final model checkpoint here")
        if pool:
            p.add_argument("--pool", help="frozen-pool response file (jsonl)")

    p_sim = sub.add_parser("simulate", help="run the stream against the generative crowd")
    common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_rep = sub.add_parser("replay", help="run the stream against a frozen response pool")
    common(p_rep, pool=True)
    p_rep.set_defaults(func=cmd_replay)

    p_srv = sub.add_parser("serve", help="serve the live crowd broker and operator API")
    common(p_srv)
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=8400)
    p_srv.add_argument("--token", default="otj-dev-token", help="shared worker/operator token")
    p_srv.set_defaults(func=cmd_serve)

    p_rpt = sub.add_parser("report", help="recompute metrics from saved episode records")
    p_rpt.add_argument("--episodes", required=True, help="episodes.jsonl from a previous run")
    p_rpt.add_argument("--data", help="dataset the episodes were recorded on")
    p_rpt.add_argument("--window", type=int, default=50)
    p_rpt.add_argument("--background", default="NONE")
    p_rpt.add_argument("--out", help="output directory for recomputed results")
    p_rpt.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver: ``envqueue run | validate | list-builtins``.

Exit codes: 0 all assertions passed, 1 an assertion failed, 2 config error,
3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .builtins import catalog
from .config import ConfigError, load_config, with_overrides
from .env import DiffusionEnvSpec, validate_spec
from .errors import EnvQueueError, SpecError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _err(msg: str):
    print(f"envqueue: {msg}", file=sys.stderr)


def cmd_run(args) -> int:
    from .experiments import resolve_spec, run_experiment
    try:
        cfg = with_overrides(load_config(args.config), seed=args.seed, replicas=args.replicas)
        if getattr(cfg, "spec", None) is not None:
            resolve_spec(cfg.spec)
    except (ConfigError, SpecError) as e:
        _err(str(e))
        return EXIT_CONFIG
    out = args.out if args.out is not None else (cfg.output or "results")
    try:
        res = run_experiment(cfg, out)
    except ConfigError as e:
        _err(str(e))
        return EXIT_CONFIG
    except (EnvQueueError, ArithmeticError, MemoryError) as e:
        _err(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    for c in res.checks:
        val = "-" if c.value is None else f"{c.value:.6g}"
        lim = "-" if c.limit is None else f"{c.limit:.6g}"
        print(f"{'PASS' if c.ok else 'FAIL'}  {c.name}  value={val}  limit={lim}")
    print(f"{cfg.kind} {res.config_hash[:12]}: {'ok' if res.ok else 'FAILED'} -> {out}")
    return EXIT_OK if res.ok else EXIT_FAIL


def cmd_validate(args) -> int:
    from .experiments import resolve_spec
    try:
        cfg = load_config(args.config)
        spec = resolve_spec(cfg.spec) if getattr(cfg, "spec", None) is not None else None
    except (ConfigError, SpecError) as e:
        _err(str(e))
        return EXIT_CONFIG
    print(f"config ok: {cfg.kind}")
    if spec is None:
        return EXIT_OK
    try:
        rep = validate_spec(spec)
    except EnvQueueError as e:
        _err(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    for c in rep.checks:
        tag = "ok" if c.ok else ("warn" if c.severity == "warning" else "FAIL")
        print(f"  {tag:4}  {c.name}" + (f"  {c.detail}" if c.detail else ""))
    if not rep.ok:
        _err(f"spec {'diffusion' if isinstance(spec, DiffusionEnvSpec) else 'discrete'} "
             f"{spec.name!r} fails: {', '.join(c.name for c in rep.failures())}")
        return EXIT_CONFIG
    return EXIT_OK


def cmd_list(args) -> int:
    cat = catalog()
    if args.json:
        print(json.dumps(cat, indent=2))
        return EXIT_OK
    for b in cat:
        params = ", ".join(f"{k}={v}" for k, v in b["parameters"].items())
        print(f"{b['name']}  [{b['family']}]\n    {b['embodies']}\n    parameters: {params}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="envqueue", description="M/M/1 queues in interactive random environments")
    p.add_argument("--version", action="version", version=f"envqueue {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: the config's 'output', else ./results)")
    r.add_argument("--seed", type=int, help="override the root seed")
    r.add_argument("--replicas", type=int, help="override the replica count")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("validate", help="check a config and its environment spec")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    ls = sub.add_parser("list-builtins", help="list the named environment specs")
    ls.add_argument("--json", action="store_true")
    ls.set_defaults(func=cmd_list)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

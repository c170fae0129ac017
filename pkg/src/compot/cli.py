"""Command-line entry point: ``compot {gram,allocate,compress,reconstruct,report}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 infeasible budget.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from . import pipeline
from . import report as reportlib
from .allocator import AllocationError, InfeasibleBudget
from .factorizer import BudgetTooTight, FactorizerError
from .gram import GramNotFactorizable
from .pipeline import RunConfig
from .tensorio import ContainerError, read_container, read_manifest, write_container

log = logging.getLogger("compot")

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INFEASIBLE = 4


class ConfigError(ValueError):
    pass


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--cr", type=float, help="global target compression ratio")
    p.add_argument("--static-cr", type=float, help="uniform per-layer ratio, dynamic allocation off")
    p.add_argument("--ks-ratio", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--init", choices=["svd", "random"])
    p.add_argument("--seed", type=int)
    p.add_argument("--early-stop-tol", type=float)
    p.add_argument("--cr-min", type=float)
    p.add_argument("--cr-max", type=float)
    p.add_argument("--grouping", choices=["global", "per-type", "tags"])
    p.add_argument("--baseline", choices=["none", "svd", "v2-alloc"])
    p.add_argument("--jobs", type=int)


def resolve_config(args, manifest_config: dict | None = None) -> RunConfig:
    """Defaults < manifest config < --config file < command-line flags."""
    merged: dict = {}
    known = {f.name for f in fields(RunConfig)}
    layers = [manifest_config or {}]
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            layers.append(json.load(fh))
    for layer in layers:
        for key, value in layer.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
    for name in known:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    try:
        cfg = RunConfig(**merged)
        cfg.factorizer()
        if cfg.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
    except (TypeError, FactorizerError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def cmd_gram(args) -> int:
    manifest = read_manifest(args.manifest)
    acts = read_container(args.acts)
    grams, info = pipeline.build_grams(manifest, acts)
    meta = {name: json.dumps({"count": d["count"]}) for name, d in info.items()}
    write_container(args.out, grams, meta)
    for name, d in info.items():
        print(f"{name}: N={d['count']} dim={d['dim']} cond={d['condition']:.3e}")
    return 0


def cmd_allocate(args) -> int:
    manifest = read_manifest(args.manifest)
    cfg = resolve_config(args, manifest.config)
    weights = read_container(args.weights)
    grams = read_container(args.grams) if args.grams else None
    manifest.validate(weights, grams)
    plan = pipeline.make_plan(manifest, weights, cfg, grams)
    pipeline.write_json(args.out, plan.to_dict())
    n_dense = sum(e.status == "DENSE" for e in plan.entries)
    print(f"plan: {len(plan.entries)} matrices, {n_dense} dense, "
          f"SVD-model CR {plan.achieved_cr:.4f} (target {plan.target_cr})")
    return 0


def cmd_compress(args) -> int:
    manifest = read_manifest(args.manifest)
    cfg = resolve_config(args, manifest.config)
    weights = read_container(args.weights)
    grams = read_container(args.grams) if args.grams else None
    manifest.validate(weights, grams)
    plan = pipeline.read_plan(args.plan)
    doc = pipeline.compress(manifest, weights, grams, plan, cfg, args.out, args.report)
    print(reportlib.format_table(doc), end="")
    return 0


def cmd_reconstruct(args) -> int:
    names = pipeline.reconstruct(args.artifacts, args.out)
    print(f"reconstructed {len(names)} layers -> {args.out}")
    return 0


def cmd_report(args) -> int:
    with open(args.report, encoding="utf-8") as fh:
        doc = json.load(fh)
    print(reportlib.format_table(doc), end="")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(reportlib.to_csv(doc))
    if args.artifacts:
        measured = pipeline.measure_artifacts(read_container(args.artifacts))
        ok = True
        for layer in doc["layers"]:
            on_disk = measured.get(layer["name"])
            if on_disk is None or on_disk > layer["bits_padded"]:
                ok = False
                print(f"MISMATCH {layer['name']}: on disk {on_disk} bits, reported {layer['bits_padded']}")
        print("storage check: " + ("ok" if ok else "FAILED"))
        return 0 if ok else 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compot", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gram", help="accumulate calibration Gram matrices")
    p.add_argument("--manifest", required=True)
    p.add_argument("--acts", required=True, help="container with <layer>/acts/<i> chunks")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gram)

    p = sub.add_parser("allocate", help="compute per-layer compression ratios")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--grams", help="needed for --baseline v2-alloc")
    p.add_argument("--out", required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("compress", help="factorize layers according to a plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--grams")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    _add_run_flags(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("reconstruct", help="expand artifacts back to dense weights")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("report", help="print a stored report, optionally as CSV")
    p.add_argument("--report", required=True)
    p.add_argument("--csv")
    p.add_argument("--artifacts", help="re-measure payload sizes against the report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GramNotFactorizable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InfeasibleBudget, BudgetTooTight) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, AllocationError, ContainerError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

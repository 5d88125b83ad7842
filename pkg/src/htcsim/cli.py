"""Command-line front end: ``validate``, ``run`` and ``compare``.

Exit codes: 0 success, 1 IO error, 2 invalid scenario or mismatched runs,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import fnmatch
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

from . import __version__
from .scenario import Scenario, ScenarioError, from_dict, load

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2, 3

# Config keys allowed to differ between runs being compared.
DEFAULT_DIFF_KEYS = ("seed", "name", "cluster.backfill", "overlay.*")

# Summary fields that identify a run rather than measure it.
_ID_FIELDS = {"scenario", "scenario_hash", "seed"}


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    return obj


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _scenario_from_args(args) -> Scenario:
    overrides = args.set or []
    if args.scenario:
        return load(args.scenario, overrides, args.preset, args.scale)
    if args.preset:
        return from_dict({}, overrides, args.preset, args.scale)
    raise ScenarioError(["no scenario: give a scenario file or --preset"])


def run_one(scenario: Scenario, seed: int, out: Optional[Path], trace: bool) -> dict:
    """Run one seed and write its artifacts; returns the summary dict."""
    from .simulation import run_scenario

    _, report, summary = run_scenario(scenario, seed, trace)
    data = summary.to_dict()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        doc = dict(data, config=_jsonable(dict(scenario.to_dict(), seed=seed)))
        (out / "summary.json").write_text(json.dumps(doc, indent=2) + "\n")
        (out / "metrics.csv").write_text(report.metrics_csv())
        if trace:
            (out / "trace.log").write_text(report.trace_log())
    return data


def cmd_validate(args) -> int:
    scenario = _scenario_from_args(args)
    print(f"OK {scenario.name} (hash {scenario.digest()})")
    return EXIT_OK


def cmd_run(args) -> int:
    scenario = _scenario_from_args(args)
    out = Path(args.out)
    base = args.seed
    if args.seeds <= 1:
        summary = run_one(scenario, base, out, args.trace)
        print(json.dumps(summary, indent=2))
        return EXIT_OK
    seeds = list(range(base, base + args.seeds))
    with ProcessPoolExecutor(max_workers=min(len(seeds), args.jobs or len(seeds))) as pool:
        futures = [pool.submit(run_one, scenario, s, out / f"seed-{s}", args.trace) for s in seeds]
        summaries = [f.result() for f in futures]
    out.mkdir(parents=True, exist_ok=True)
    (out / "summaries.json").write_text(json.dumps(summaries, indent=2) + "\n")
    for s in summaries:
        print(json.dumps(s))
    return EXIT_OK


def compare(a: dict, b: dict, allow: tuple = DEFAULT_DIFF_KEYS) -> dict:
    """Deltas ``b - a`` of every numeric summary field.

    Raises ScenarioError when the configurations differ outside ``allow``.
    """
    ca, cb = _flatten(a.get("config", {})), _flatten(b.get("config", {}))
    bad = []
    for key in sorted(set(ca) | set(cb)):
        if ca.get(key) != cb.get(key) and not any(fnmatch.fnmatchcase(key, pat) for pat in allow):
            bad.append(f"{key}: {ca.get(key)!r} vs {cb.get(key)!r}")
    if bad:
        raise ScenarioError(bad)
    deltas = {}
    for key, va in a.items():
        vb = b.get(key)
        if key in _ID_FIELDS or key == "config":
            continue
        if isinstance(va, bool) or isinstance(vb, bool) or not isinstance(va, (int, float)) \
                or not isinstance(vb, (int, float)):
            continue
        diff = vb - va
        deltas[key] = {"a": va, "b": vb, "abs": diff, "rel": (diff / abs(va)) if va else None}
    return {"a": a.get("scenario"), "b": b.get("scenario"), "seed_a": a.get("seed"), "seed_b": b.get("seed"),
            "differing_keys": sorted(k for k in set(ca) | set(cb) if ca.get(k) != cb.get(k)),
            "deltas": deltas}


def cmd_compare(args) -> int:
    docs = []
    for d in (args.run_a, args.run_b):
        docs.append(json.loads((Path(d) / "summary.json").read_text()))
    report = compare(docs[0], docs[1], tuple(DEFAULT_DIFF_KEYS) + tuple(args.allow or ()))
    width = max((len(k) for k in report["deltas"]), default=6)
    print(f"{'metric':<{width}}  {'a':>14}  {'b':>14}  {'delta':>14}  {'rel':>9}")
    for key, d in report["deltas"].items():
        rel = "-" if d["rel"] is None else f"{d['rel']:+.3%}"
        print(f"{key:<{width}}  {d['a']:>14.6g}  {d['b']:>14.6g}  {d['abs']:>+14.6g}  {rel:>9}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.json").write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="htcsim", description="Simulate HTC workloads on HPC clusters.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p):
        p.add_argument("scenario", nargs="?", help="scenario TOML file")
        p.add_argument("--preset", help="start from a named preset (ligo, atlas_bw, titan_backfill)")
        p.add_argument("--scale", type=float, help="preset scale factor")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a scenario key, e.g. cluster.nodes=128 (repeatable)")

    p = sub.add_parser("validate", help="check a scenario file")
    scenario_args(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run a scenario")
    scenario_args(p)
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--seeds", type=int, default=1, help="run N consecutive seeds in parallel")
    p.add_argument("--jobs", type=int, default=0, help="worker processes for --seeds (default: one per seed)")
    p.add_argument("--out", default="out", help="output directory (default ./out)")
    p.add_argument("--trace", action="store_true", help="also write trace.log")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="compare two run directories")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--allow", action="append", metavar="KEY",
                   help="extra config key pattern allowed to differ (repeatable)")
    p.add_argument("--out", default=".", help="directory for compare.json (default .)")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seeds", 1) < 1:
        print("error: --seeds must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ScenarioError as exc:
        for line in exc.diagnostics:
            print(f"error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"error: bad summary.json: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Exit codes: 0 success, 1 internal error, 2 usage or config error,
3 capacity error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone

from . import __version__
from .config import canonical_json, config_from_dict, data_path, load_config, override
from .errors import CapacityError, ParameterError
from .experiments import CALIBRATION_SEED, calibrate, records_to_csv, run_experiment
from .rng import DEFAULT_SEED
from .sbm_core import SbmParams, derived_params, generate_sbm, threshold_report, write_graph

EXPERIMENT_COMMANDS = {
    # subcommand: (experiment id, default fixture)
    "tree": ("tree_recovery", "theorem1_regime.json"),
    "recover": ("sbm_recovery", "sbm_k2.json"),
    "conjecture": ("conjecture", "appendixB.json"),
    "lemmas": ("lemmas", "mutation_pair.json"),
    "sanity": ("sanity", "sanity.json"),
}

# fixture, acceptance threshold on the lower 95% confidence limit
CALIBRATION_TARGETS = [
    ("theorem1_regime.json", 1.0 / 64 + 0.01),
    ("super_ks_k2.json", 0.55),
]

LOCKFILE = "calibration.lock.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _json_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_set(items):
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise ParameterError(f"--set expects KEY=VALUE, got {item!r}")
        out[key] = _json_value(val)
    return out


def build_parser():
    p = _Parser(prog="lsbm", description="Labeled SBM simulation and inference lab.")
    p.add_argument("--version", action="version", version=f"lsbm {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="sample a labeled SBM and write its edge list")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--k", type=int, required=True)
    g.add_argument("--a", type=float, required=True)
    g.add_argument("--b", type=float, required=True)
    g.add_argument("--p", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=DEFAULT_SEED)
    g.add_argument("--out", default=".")
    g.add_argument("--no-sigma", action="store_true", help="omit hidden labels from the sidecar")

    t = sub.add_parser("thresholds", help="print derived tree parameters and thresholds")
    t.add_argument("--a", type=float, required=True)
    t.add_argument("--b", type=float, required=True)
    t.add_argument("--k", type=int, required=True)

    for name, (exp, fixture) in EXPERIMENT_COMMANDS.items():
        e = sub.add_parser(name, help=f"run the {exp} experiment (default config {fixture})")
        _experiment_flags(e)

    c = sub.add_parser("calibrate", help="run pilots and write the calibration lockfile")
    c.add_argument("--seed", type=int, default=CALIBRATION_SEED)
    c.add_argument("--trials", type=int)
    c.add_argument("--threads", type=int, default=1)
    c.add_argument("--out", default=".")
    return p


def _experiment_flags(e):
    e.add_argument("--config", help="config JSON (or a run manifest); defaults to a shipped fixture")
    e.add_argument("--seed", type=int)
    e.add_argument("--trials", type=int)
    e.add_argument("--threads", type=int, default=1, help="worker processes, 0 = all CPUs")
    e.add_argument("--out", help="output directory")
    e.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="replace a grid axis, e.g. --set 'eta=[0.1,0.2]'")


def _resolve_config(path, fixture):
    if path is None:
        return load_config(data_path(fixture))
    if os.path.basename(path) == path and not os.path.exists(path):
        shipped = data_path(path)
        if os.path.exists(shipped):
            path = shipped
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return load_config(path)
    if isinstance(obj, dict) and "subcommand" in obj and "config" in obj:
        return config_from_dict(obj["config"])
    return load_config(path)


def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _stamp(t):
    return datetime.fromtimestamp(t, timezone.utc).isoformat()


def write_manifest(out_dir, subcommand, config, seed, start, outputs):
    end = time.time()
    manifest = {
        "subcommand": subcommand, "config": config, "seed": seed,
        "code_version": __version__, "start": _stamp(start), "end": _stamp(end),
        "wall_time_s": round(end - start, 3), "outputs": outputs,
    }
    path = os.path.join(out_dir, "manifest.json")
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def cmd_thresholds(args):
    rep = threshold_report(args.a, args.b, args.k)
    tp = derived_params(args.a, args.b, args.k)
    print(f"d={tp.d:.4f}")
    print(f"eta={tp.eta:.4f}")
    print(f"lambda={tp.lam:.4f}")
    print(f"dλ={rep.d_lambda:.4f}")
    print(f"dλ²={rep.d_lambda_sq:.4f}")
    print(f"ks_above={str(rep.ks_above).lower()}")
    print(f"tree_above={str(rep.tree_above).lower()}")
    return 0


def cmd_gen(args):
    start = time.time()
    params = SbmParams(n=args.n, k=args.k, a=args.a, b=args.b, p=args.p)
    graph = generate_sbm(params, args.seed)
    os.makedirs(args.out, exist_ok=True)
    edges = os.path.join(args.out, "graph.edges")
    sidecar = os.path.join(args.out, "graph.json")
    write_graph(graph, edges, sidecar, include_sigma=not args.no_sigma)
    config = {"n": args.n, "k": args.k, "a": args.a, "b": args.b, "p": args.p}
    write_manifest(args.out, "gen", config, args.seed, start, [edges, sidecar])
    print(f"wrote {graph.num_edges} edges to {edges}")
    return 0


def cmd_experiment(args):
    start = time.time()
    exp, fixture = EXPERIMENT_COMMANDS[args.command]
    cfg = _resolve_config(args.config, fixture)
    if cfg.experiment != exp:
        raise ParameterError(f"{args.command} needs a {exp!r} config, got {cfg.experiment!r}")
    cfg = override(cfg, trials=args.trials, seed=args.seed, out=args.out, **_parse_set(args.set))
    out_dir = cfg.out or "."
    os.makedirs(out_dir, exist_ok=True)
    records = run_experiment(cfg, threads=args.threads)
    csv_path = os.path.join(out_dir, f"{args.command}.csv")
    _atomic_write(csv_path, records_to_csv(records))
    write_manifest(out_dir, args.command, json.loads(canonical_json(cfg)), cfg.seed, start, [csv_path])
    print(f"{len(records)} records from {len(cfg.cells())} cells written to {csv_path}")
    return 0


def cmd_calibrate(args):
    start = time.time()
    targets = [(name, load_config(data_path(name)), thr) for name, thr in CALIBRATION_TARGETS]
    lock = calibrate(targets, seed=args.seed, trials=args.trials, threads=args.threads)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, LOCKFILE)
    _atomic_write(path, json.dumps(lock, indent=2, sort_keys=True) + "\n")
    write_manifest(args.out, "calibrate", {"targets": CALIBRATION_TARGETS, "trials": args.trials},
                   args.seed, start, [path])
    for e in lock["entries"]:
        flag = "ok" if e["meets_threshold"] else "BELOW THRESHOLD"
        print(f"{e['config']} {e['method']}: {e['estimate']:.4f} "
              f"[{e['ci_low']:.4f}, {e['ci_high']:.4f}] {flag}")
    return 0


COMMANDS = {"gen": cmd_gen, "thresholds": cmd_thresholds, "calibrate": cmd_calibrate}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handler = COMMANDS.get(args.command, cmd_experiment)
    try:
        return handler(args)
    except ParameterError as exc:
        print(f"lsbm: error: {exc}", file=sys.stderr)
        return 2
    except CapacityError as exc:
        print(f"lsbm: capacity exceeded: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001
        print(f"lsbm: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

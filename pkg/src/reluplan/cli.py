"""``reluplan`` command line.

Stdout carries only the payload (JSON, CSV or DOT); diagnostics and error
records go to stderr. Exit codes: 0 success, 1 domain error, 2 usage error.
Per-subcommand defaults can come from ``--config file.json`` holding a section
named after the subcommand; explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import accounting, cellgraph, latency, pisim, placement, relaxation
from .errors import ReluPlanError
from .plan import NetworkPlan, default_placement
from .skeleton import build_skeleton

log = logging.getLogger("reluplan")

SEED_ENV = "SPHYNX_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _placement(text: str) -> tuple[int, int]:
    try:
        i, j = (int(x) for x in str(text).replace("-", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"placement must look like 'i,j', got {text!r}")
    return i, j


def _int_pair(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"range must look like 'lo,hi', got {text!r}")
    return lo, hi


# -- shared option groups ------------------------------------------------------


def _common(p):
    p.add_argument("--config", metavar="PATH", help="JSON file with a section per subcommand")
    p.add_argument("--seed", type=int, help=f"RNG seed (default: ${SEED_ENV} or 0)")
    p.add_argument("--output-dir", metavar="DIR", help="directory for artifact files")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _plan_args(p):
    p.add_argument("--h0", type=int, help="cell input height")
    p.add_argument("--w0", type=int, help="cell input width")
    p.add_argument("--channels", type=int, help="initial channels C")
    p.add_argument("--depth", type=int, help="number of cells D")
    p.add_argument("--placement", type=_placement, help="reduce cell indices 'i,j' (default D/3,2D/3)")
    p.add_argument("--stem", choices=["direct", "imagenet3"], help="stem type (default direct)")
    p.add_argument("--balancing", choices=["relu", "flop"], help="channel policy at reduces (default relu)")


def _search_args(p):
    p.add_argument("--evaluator", choices=["bowl", "synthetic", "skeleton"],
                   help="candidate family (default bowl)")
    p.add_argument("--branches", type=int, help="branch count K for bowl/synthetic (default 6)")
    p.add_argument("--best", type=int, help="planted best branch (default 0)")
    p.add_argument("--margin", type=float, help="planted loss margin for bowl (default 0.5)")
    p.add_argument("--skeleton-depth", type=int, help="depth D for the skeleton evaluator (default 5)")
    p.add_argument("--epochs", type=int, help="training epochs (default 40)")
    p.add_argument("--batch-size", type=int, help="minibatch size (default 32)")
    p.add_argument("--steps-per-epoch", type=int, help="minibatches per epoch (default 8)")
    p.add_argument("--tau-start", type=float, help="initial temperature (default 1000)")
    p.add_argument("--tau-end", type=float, help="final temperature (default 0.1)")
    p.add_argument("--beta-lr", type=float, help="placement logit learning rate (default 0.01)")
    p.add_argument("--w-lr", type=float, help="weight learning rate (default 0.025)")


def _genotype_arg(p, required_help="genotype JSON file"):
    p.add_argument("--genotype", metavar="PATH", help=required_help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reluplan", description="Plan ReLU-budgeted networks for private inference.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("validate", help="check a genotype against its space rules")
    _genotype_arg(p)
    _common(p)

    p = sub.add_parser("count", help="ReLU/FLOP/parameter ledger of a network plan")
    _plan_args(p)
    _genotype_arg(p, "legacy-space genotype for legacy cell counting")
    p.add_argument("--share-relus", action="store_true", default=None,
                   help="apply ReLU sharing when counting a legacy genotype")
    p.add_argument("--format", choices=["json", "csv"], help="stdout format (default json)")
    _common(p)

    p = sub.add_parser("plan", help="(C, D) pairs whose ReLU total is near a budget")
    p.add_argument("--budget", type=int, help="target ReLU count")
    p.add_argument("--tol", type=float, help="relative tolerance (default 0.05)")
    p.add_argument("--h0", type=int, help="cell input height (default 32)")
    p.add_argument("--w0", type=int, help="cell input width (default 32)")
    p.add_argument("--c-range", type=_int_pair, help="channel range 'lo,hi' (default 5,10)")
    p.add_argument("--d-range", type=_int_pair, help="depth range 'lo,hi' (default 5,10)")
    _common(p)

    p = sub.add_parser("skeleton", help="stage-by-stage network skeleton")
    _plan_args(p)
    _common(p)

    p = sub.add_parser("place-search", help="Gumbel-sampled search over reduce placements")
    _search_args(p)
    _common(p)

    p = sub.add_parser("place-grid", help="train every placement branch independently")
    _search_args(p)
    p.add_argument("--workers", type=int, help="parallel branch trainers (default 1)")
    _common(p)

    p = sub.add_parser("discretize", help="extract a genotype from relaxation logits")
    p.add_argument("--theta", metavar="PATH", help="relaxation state JSON")
    p.add_argument("--random", action="store_true", default=None,
                   help="discretize random logits instead of a file")
    p.add_argument("--nodes", type=int, help="node count N for --random (default 7)")
    _common(p)

    p = sub.add_parser("simulate", help="run the two-party inference protocol")
    p.add_argument("--model", metavar="PATH", help="dense model JSON {layers: [{W, b}]}")
    p.add_argument("--input", metavar="PATH", help="CSV, one input vector per row")
    p.add_argument("--scale-bits", type=int, help="fixed-point fraction bits (default 12)")
    p.add_argument("--modulus", type=int, help="prime field modulus (default 2^61-1)")
    p.add_argument("--guard-bits", type=int, help="overflow guard bits (default 4)")
    p.add_argument("--transport", choices=["inproc", "socket"], help="message transport (default inproc)")
    _common(p)

    p = sub.add_parser("latency-fit", help="fit the per-ReLU latency model")
    p.add_argument("--csv", metavar="PATH", help="records CSV (label,relus,latency_ms[,accuracy_pct])")
    p.add_argument("--fixture", choices=["cifar100", "tiny_imagenet", "imagenet"],
                   help="use a bundled benchmark table instead of --csv")
    p.add_argument("--label", help="only fit rows with this label")
    p.add_argument("--rows", help="comma-separated row indices to fit (default all)")
    _common(p)

    p = sub.add_parser("latency-predict", help="predict latency for ReLU counts")
    p.add_argument("--model", metavar="PATH", help="latency model JSON")
    p.add_argument("--relus", type=int, nargs="+", help="ReLU counts")
    _common(p)

    p = sub.add_parser("pareto", help="accuracy/latency Pareto frontier")
    p.add_argument("--csv", metavar="PATH", help="records CSV with accuracy_pct")
    p.add_argument("--fixture", choices=["cifar100", "tiny_imagenet", "imagenet"],
                   help="use a bundled benchmark table instead of --csv")
    _common(p)

    p = sub.add_parser("dot", help="Graphviz DOT of a genotype")
    _genotype_arg(p)
    p.add_argument("--cell", choices=["both", "normal", "reduce"], help="which cell (default both)")
    _common(p)
    return parser


DEFAULTS = {
    "count": {"stem": "direct", "balancing": "relu", "format": "json", "share_relus": False},
    "plan": {"tol": 0.05, "h0": 32, "w0": 32, "c_range": (5, 10), "d_range": (5, 10)},
    "skeleton": {"stem": "direct", "balancing": "relu"},
    "place-search": {"evaluator": "bowl", "branches": 6, "best": 0, "margin": 0.5, "skeleton_depth": 5,
                     "epochs": 40, "batch_size": 32, "steps_per_epoch": 8, "tau_start": 1000.0,
                     "tau_end": 0.1, "beta_lr": 0.01, "w_lr": 0.025},
    "discretize": {"nodes": 7, "random": False},
    "simulate": {"scale_bits": 12, "modulus": pisim.MERSENNE_61, "guard_bits": 4, "transport": "inproc"},
    "dot": {"cell": "both"},
}
DEFAULTS["place-grid"] = {**DEFAULTS["place-search"], "workers": 1}

_CONVERTERS = {"placement": _placement, "c_range": _int_pair, "d_range": _int_pair}


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _apply_config(sub: argparse.ArgumentParser, command: str, config_path: str | None):
    """Layer built-in defaults, then the config section, under the explicit flags."""
    dests = {a.dest for a in sub._actions} - {"help", "config"}
    values = dict(DEFAULTS.get(command, {}))
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {config_path}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}")
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        known = set(COMMANDS)
        unknown_sections = set(data) - known
        if unknown_sections:
            raise UsageError(f"unknown config sections: {sorted(unknown_sections)}")
        section = data.get(command, {})
        if not isinstance(section, dict):
            raise UsageError(f"config section {command!r} must be an object")
        normalized = {k.replace("-", "_"): v for k, v in section.items()}
        unknown = set(normalized) - dests
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        for k, v in normalized.items():
            values[k] = _CONVERTERS[k](",".join(map(str, v)) if isinstance(v, list) else v) \
                if k in _CONVERTERS else v
    sub.set_defaults(**values)


def parse_args(argv):
    parser = build_parser()
    first = parser.parse_args(argv)
    if not first.command:
        raise UsageError("reluplan: a subcommand is required (see --help)")
    sub = _subparser(parser, first.command)
    _apply_config(sub, first.command, first.config)
    args = parser.parse_args(argv)
    if args.seed is None:
        env = os.environ.get(SEED_ENV)
        try:
            args.seed = int(env) if env else 0
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}")
    return args


def _need(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        flags = ", ".join("--" + m.replace("_", "-") for m in missing)
        raise UsageError(f"reluplan {args.command}: missing required option(s): {flags}")


# -- artifacts -------------------------------------------------------------------


class Output:
    def __init__(self, args):
        self.dir = Path(args.output_dir) if args.output_dir else None
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    def file(self, name: str, data: str | bytes):
        if self.dir is None:
            return
        path = self.dir / name
        if isinstance(data, bytes):
            path.write_bytes(data)
        else:
            path.write_text(data)
        log.info("wrote %s", path)


def _json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except FileNotFoundError:
        raise ReluPlanError(f"input file not found: {path}", path=path)


def _plan(args) -> NetworkPlan:
    _need(args, "channels", "depth")
    if args.stem == "imagenet3":
        h0 = 28 if args.h0 is None else args.h0
        w0 = 28 if args.w0 is None else args.w0
    else:
        _need(args, "h0", "w0")
        h0, w0 = args.h0, args.w0
    placement_ = args.placement or default_placement(args.depth)
    return NetworkPlan(h0, w0, args.channels, args.depth, placement_, stem=args.stem,
                       balancing=args.balancing)


# -- commands --------------------------------------------------------------------


def cmd_validate(args, out):
    _need(args, "genotype")
    g = cellgraph.loads(_read(args.genotype))
    report = cellgraph.validate(g)
    text = _json(report.to_dict())
    out.file("validation.json", text)
    if not report.ok:
        first = report.violations[0]
        raise cellgraph.GenotypeError(f"{first.rule}: {first.message}", payload=text,
                                      violations=len(report.violations))
    return text


def cmd_count(args, out):
    plan = _plan(args)
    if args.genotype:
        g = cellgraph.loads(_read(args.genotype))
        ledger = accounting.count_legacy(plan, g, share_relus=bool(args.share_relus))
    else:
        ledger = accounting.count_plan(plan)
    doc = {"plan": plan.to_dict(), **ledger.to_dict()}
    out.file("ledger.json", _json(doc))
    out.file("ledger.csv", ledger.to_csv())
    return ledger.to_csv() if args.format == "csv" else _json(doc)


def cmd_plan(args, out):
    _need(args, "budget")
    rows = accounting.plan_budget(args.budget, args.h0, args.w0, args.c_range, args.d_range, args.tol)
    text = accounting.plan_budget_csv(rows, args.budget)
    out.file("plan.csv", text)
    return text


def cmd_skeleton(args, out):
    skel = build_skeleton(_plan(args))
    text = _json(skel.to_dict())
    out.file("skeleton.json", text)
    return text


def _evaluator(args):
    if args.evaluator == "bowl":
        return placement.QuadraticBowlEvaluator.planted(k=args.branches, best=args.best, margin=args.margin,
                                                        seed=args.seed, steps_per_epoch=args.steps_per_epoch)
    if args.evaluator == "synthetic":
        return placement.SyntheticEvaluator.planted(k=args.branches, best=args.best, seed=args.seed,
                                                    steps_per_epoch=args.steps_per_epoch)
    return placement.SurrogateSkeletonEvaluator(depth=args.skeleton_depth, seed=args.seed,
                                                steps_per_epoch=args.steps_per_epoch)


def _search_config(args):
    if args.evaluator != "skeleton" and not 0 <= args.best < args.branches:
        raise ReluPlanError("planted branch out of range", best=args.best, branches=args.branches)
    return placement.SearchConfig(
        epochs=args.epochs, batch_size=args.batch_size, steps_per_epoch=args.steps_per_epoch,
        tau_start=args.tau_start, tau_end=args.tau_end, beta_lr=args.beta_lr, w_lr=args.w_lr,
        seed=args.seed)


def cmd_place_search(args, out):
    config = _search_config(args)
    result = placement.run_search(_evaluator(args), config)
    out.file("search.json", result.to_json())
    out.file("trajectory.csv", result.trajectory_csv())
    return result.to_json()


def cmd_place_grid(args, out):
    config = _search_config(args)
    result = placement.grid_search(_evaluator(args), config, workers=args.workers)
    out.file("grid.json", result.to_json())
    out.file("grid.csv", result.to_csv())
    return result.to_csv()


def cmd_discretize(args, out):
    if args.random:
        rng = np.random.default_rng(args.seed)
        state = relaxation.RelaxationState.init(args.nodes, rng=rng, scale=1.0)
    else:
        _need(args, "theta")
        state = relaxation.RelaxationState.from_json(_read(args.theta))
    g = relaxation.discretize(state)
    text = cellgraph.dumps(g)
    out.file("theta.json", state.to_json())
    out.file("genotype.json", text)
    return text


def _read_inputs(path) -> list[list[float]]:
    rows = []
    for row in csv.reader(io.StringIO(_read(path))):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            rows.append([float(c) for c in row])
        except ValueError:
            raise ReluPlanError(f"non-numeric input row: {row}", path=path)
    if not rows:
        raise ReluPlanError("input CSV has no rows", path=path)
    return rows


def cmd_simulate(args, out):
    _need(args, "model", "input")
    try:
        model = pisim.DenseModel.from_dict(json.loads(_read(args.model)))
    except json.JSONDecodeError as exc:
        raise ReluPlanError(f"model is not valid JSON: {exc}", path=args.model)
    codec = pisim.FixedPointCodec(args.scale_bits, args.modulus, args.guard_bits)
    enc = pisim.EncodedModel.encode(model, codec)
    rng = np.random.default_rng(args.seed)
    blob, sidecar = bytearray(), []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row", *[f"y{i}" for i in range(model.dims[-1])]])
    for i, x in enumerate(_read_inputs(args.input)):
        material = pisim.offline_phase(enc, rng)
        transport = pisim.SocketTransport() if args.transport == "socket" else pisim.InProcessTransport()
        try:
            result = pisim.online_inference(enc, x, material, transport)
        finally:
            transport.close()
        blob.extend(result.transcript.to_bytes())
        sidecar.append({"row": i, "messages": result.transcript.sidecar()})
        writer.writerow([i, *map(repr, result.decoded(codec))])
        log.info("row %d: %d messages", i, len(result.transcript.messages))
    out.file("transcript.bin", bytes(blob))
    out.file("transcript.json", _json(sidecar))
    out.file("outputs.csv", buf.getvalue())
    return buf.getvalue()


def _records(args):
    if args.fixture:
        return latency.fixture(args.fixture)
    _need(args, "csv")
    return latency.read_records(_read(args.csv))


def cmd_latency_fit(args, out):
    records = _records(args)
    if args.label:
        records = [r for r in records if r.label == args.label]
    if args.rows:
        try:
            idx = [int(i) for i in args.rows.split(",")]
            records = [records[i] for i in idx]
        except (ValueError, IndexError):
            raise ReluPlanError(f"bad row selection {args.rows!r}", rows=len(records))
    model = latency.calibrate([(r.relus, r.latency_ms) for r in records])
    text = model.to_json()
    out.file("latency_model.json", text)
    return text


def cmd_latency_predict(args, out):
    _need(args, "model", "relus")
    try:
        model = latency.LatencyModel.from_dict(json.loads(_read(args.model)))
    except json.JSONDecodeError as exc:
        raise ReluPlanError(f"latency model is not valid JSON: {exc}", path=args.model)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["relus", "latency_ms"])
    for r in args.relus:
        writer.writerow([r, repr(latency.predict(model, r))])
    out.file("predictions.csv", buf.getvalue())
    return buf.getvalue()


def cmd_pareto(args, out):
    front = latency.pareto_frontier(_records(args))
    text = latency.write_records(front)
    out.file("pareto.csv", text)
    return text


def cmd_dot(args, out):
    _need(args, "genotype")
    g = cellgraph.loads(_read(args.genotype))
    if args.cell == "both":
        text = cellgraph.to_dot(g)
    else:
        report = cellgraph.validate(g)
        if not report.ok:
            raise cellgraph.GenotypeError("invalid genotype", violations=len(report.violations))
        text = cellgraph.cell_to_dot(getattr(g, args.cell), args.cell)
    out.file("genotype.dot", text)
    return text


COMMANDS = {
    "validate": cmd_validate,
    "count": cmd_count,
    "plan": cmd_plan,
    "skeleton": cmd_skeleton,
    "place-search": cmd_place_search,
    "place-grid": cmd_place_grid,
    "discretize": cmd_discretize,
    "simulate": cmd_simulate,
    "latency-fit": cmd_latency_fit,
    "latency-predict": cmd_latency_predict,
    "pareto": cmd_pareto,
    "dot": cmd_dot,
}


def _error_record(code, message, context=None) -> str:
    return json.dumps({"code": code, "message": message, "context": context or {}}, default=str)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(_error_record("usage_error", str(exc)), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        out = Output(args)
        payload = COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(_error_record("usage_error", str(exc)), file=sys.stderr)
        return 2
    except ReluPlanError as exc:
        context = dict(exc.context)
        payload = context.pop("payload", None)
        if payload:
            sys.stdout.write(payload)
        print(_error_record(exc.code, exc.message, context), file=sys.stderr)
        return 1
    except OSError as exc:
        print(_error_record("io_error", str(exc)), file=sys.stderr)
        return 1
    sys.stdout.write(payload)
    return 0


if __name__ == "__main__":
    sys.exit(main())

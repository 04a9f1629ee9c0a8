"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or model error.  Graph and
manifest arguments accept ``fixture:<name>`` for the packaged scenarios.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fixtures
from .errors import GraphParseError, TrekUnifyError, UsageError
from .graph import (
    WeightedDag,
    enumerate_treks,
    implied_covariance,
    max_trek_deviation,
    parse_graph,
    random_weighted_dag,
    trek_correlation,
)
from .marginals import (
    build_correlation_table,
    extract_ci,
    load_marginals,
    population_marginals,
    simulate_marginals,
    write_manifest,
)
from .planner import plan
from .semsim import NOISE_FAMILIES, NoiseSpec
from .unify import (
    PartialGraph,
    PruneOptions,
    enumerate_candidates,
    latent_check,
    prune_pipeline,
    redundant_edge_check,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- argument resolution -------------------------------------------------------


def _graph_path(arg: str) -> Path:
    """``fixture:<name>`` is a scenario graph; ``fixture:<name>.<side>`` a packaged triangle."""
    if arg.startswith("fixture:"):
        name, _, side = arg.split(":", 1)[1].partition(".")
        sc = fixtures.scenario(name)
        return sc.triangle_path(side) if side else sc.graph_path
    return Path(arg)


def _read_graph(arg: str) -> WeightedDag:
    path = _graph_path(arg)
    return parse_graph(path.read_text(), str(path))


def _load(arg: str):
    if arg.startswith("fixture:"):
        return load_marginals(fixtures.scenario(arg.split(":", 1)[1]).manifest_path)
    return load_marginals(arg)


def _load_all(args) -> list:
    out = []
    for m in args.manifest:
        out.extend(_load(m))
    ids = [m.id for m in out]
    if len(set(ids)) != len(ids):
        # several manifests may reuse ids; make them unique in load order
        seen: dict[str, int] = {}
        fixed = []
        for m in out:
            k = seen.get(m.id, 0)
            seen[m.id] = k + 1
            fixed.append(m if k == 0 else replace(m, id=f"{m.id}#{k}"))
        out = fixed
    return out


def _population(args) -> bool | None:
    return True if args.population else None


def parse_sets(text: str) -> list[tuple[str, ...]]:
    out = [tuple(v.strip() for v in chunk.split(",") if v.strip()) for chunk in text.split(";")]
    out = [s for s in out if s]
    if not out:
        raise UsageError("--sets needs at least one variable set")
    return out


def parse_partial_graph(text: str, source: str = "<string>") -> PartialGraph:
    """Marginal graph with ``p -> c [coef]`` and ``u -- v`` lines."""
    nodes: list[str] = []
    directed: dict[tuple[str, str], float | None] = {}
    undirected: list[tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "node" and len(parts) == 2:
            nodes.append(parts[1])
            continue
        if len(parts) in (3, 4) and parts[1] in ("->", "--"):
            u, op, v = parts[:3]
            for w in (u, v):
                if w not in nodes:
                    raise GraphParseError(source, lineno, f"undeclared node {w!r}")
            if op == "--":
                if len(parts) == 4:
                    raise GraphParseError(source, lineno, "undirected edges carry no coefficient")
                undirected.append((u, v))
                continue
            coef = None
            if len(parts) == 4:
                try:
                    coef = float(parts[3])
                except ValueError:
                    raise GraphParseError(source, lineno, f"bad coefficient {parts[3]!r}") from None
            directed[(u, v)] = coef
            continue
        raise GraphParseError(source, lineno, f"cannot parse {raw.strip()!r}")
    return PartialGraph(tuple(nodes), directed, tuple(undirected))


def _check_common(args) -> None:
    alpha = getattr(args, "alpha", None)
    if alpha is not None and not 0.0 < alpha < 1.0:
        raise UsageError(f"--alpha must lie in (0, 1), got {alpha}")
    tol = getattr(args, "tol", None)
    if tol is not None and not tol > 0:
        raise UsageError(f"--tol must be positive, got {tol}")
    budget = getattr(args, "budget", None)
    if budget is not None and budget < 2:
        raise UsageError(f"--budget must be at least 2, got {budget}")


def _emit(args, text: str, payload: dict) -> None:
    out = json.dumps(payload, indent=2, sort_keys=True) + "\n" if args.format == "json" else text
    if args.out:
        Path(args.out).write_text(out)
    else:
        sys.stdout.write(out)


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args) -> None:
    wdag = _read_graph(args.graph)
    if args.sets:
        sets = parse_sets(args.sets)
    elif args.graph.startswith("fixture:"):
        sets = fixtures.scenario(args.graph.split(":", 1)[1]).sets
    else:
        raise UsageError("simulate needs --sets for a graph file")
    if not args.out:
        raise UsageError("simulate needs --out DIR")
    if args.population:
        ms = population_marginals(implied_covariance(wdag), sets)
    else:
        if args.n < 4:
            raise UsageError("--n must be at least 4")
        ms = simulate_marginals(wdag, sets, args.n, args.seed, NoiseSpec(args.noise))
    path = write_manifest(ms, args.out)
    msg = f"wrote {len(ms)} marginals to {path}\n"
    if args.format == "json":
        sys.stdout.write(json.dumps({"manifest": str(path), "marginals": [m.id for m in ms]}, sort_keys=True) + "\n")
    else:
        sys.stdout.write(msg)


def cmd_treks(args) -> None:
    wdag = _read_graph(args.graph)
    for v in (args.x, args.y):
        wdag.dag.check_node(v)
    treks = enumerate_treks(wdag, args.x, args.y)
    total = trek_correlation(wdag, args.x, args.y)
    oracle = implied_covariance(wdag)[args.x, args.y]
    lines = [f"treks between {args.x} and {args.y}: {len(treks)}"]
    payload_treks = []
    for t in treks:
        w = float(np.prod([wdag.coeff[e] for e in t.edges]))
        lines.append(f"  {t}   product {w:.6g}")
        payload_treks.append({"trek": str(t), "source": t.source, "left": list(t.left), "right": list(t.right), "product": w})
    lines.append(f"trek sum {total:.12g}")
    lines.append(f"implied correlation {oracle:.12g}")
    _emit(
        args,
        "\n".join(lines) + "\n",
        {"x": args.x, "y": args.y, "treks": payload_treks, "trek_sum": total, "implied": oracle},
    )


def cmd_verify(args) -> None:
    if args.graph:
        graphs = [(args.graph, _read_graph(args.graph))]
    else:
        rng = np.random.default_rng(args.seed)
        graphs = []
        for i in range(args.random):
            k = int(rng.integers(2, args.nodes + 1))
            graphs.append((f"random#{i}", random_weighted_dag(rng, k)))
    rows = [(name, max_trek_deviation(w)) for name, w in graphs]
    worst = max(d for _, d in rows)
    lines = [f"{name}: max |trek sum - implied| = {d:.3e}" for name, d in rows] if len(rows) <= 20 else []
    lines.append(f"max deviation over {len(rows)} graph(s): {worst:.3e}")
    _emit(args, "\n".join(lines) + "\n", {"graphs": [{"name": n, "max_deviation": d} for n, d in rows], "max_deviation": worst})


def cmd_ci(args) -> None:
    ms = _load_all(args)
    cat = extract_ci(ms, args.alpha, population=_population(args))
    lines = [f"{len(cat)} statements"]
    for s in cat:
        lines.append(f"  {s}   p={s.p_value:.4g}  [{s.source}]")
    payload = {
        "statements": [
            {"x": s.x, "y": s.y, "given": sorted(s.given), "verdict": s.verdict, "p_value": s.p_value, "source": s.source}
            for s in cat
        ]
    }
    _emit(args, "\n".join(lines) + "\n", payload)


def _forbidden(args) -> tuple[tuple[str, str], ...]:
    out = []
    for item in args.forbid or ():
        parts = item.split("-")
        if len(parts) != 2 or not all(parts):
            raise UsageError(f"--forbid expects U-V, got {item!r}")
        out.append(tuple(parts))
    return tuple(out)


def cmd_candidates(args) -> None:
    ms = _load_all(args)
    cat = extract_ci(ms, args.alpha, population=_population(args))
    union = sorted(set().union(*(m.variables for m in ms)))
    cands = enumerate_candidates(union, cat, _forbidden(args), faithfulness=not args.no_faithfulness)
    lines = [f"{len(cands)} equivalence classes over {', '.join(union)}"]
    for i, c in enumerate(cands, start=1):
        edges = ", ".join(f"{p}->{q}" for p, q in sorted(c.graph.edges)) or "(no edges)"
        lines.append(f"[{i}] {edges}  ({len(c.members)} member DAGs)")
    if not cands:
        lines.append("no DAG over these variables reproduces the CI statements")
    _emit(args, "\n".join(lines) + "\n", {"variables": union, "candidates": [c.to_dict() for c in cands]})


def _quad(text: str | None) -> tuple[str, str, str, str] | None:
    if text is None:
        return None
    vs = tuple(v.strip() for v in text.split(","))
    if len(vs) != 4 or not all(vs):
        raise UsageError(f"expected four comma-separated variables, got {text!r}")
    return vs


def _triangle(arg: str) -> PartialGraph:
    path = _graph_path(arg)
    return parse_partial_graph(path.read_text(), str(path))


def cmd_prune(args) -> None:
    ms = _load_all(args)
    triangles = None
    if args.triangles:
        triangles = (_triangle(args.triangles[0]), _triangle(args.triangles[1]))
    opts = PruneOptions(
        alpha=args.alpha,
        tol=args.tol,
        population=_population(args),
        faithfulness=not args.no_faithfulness,
        forbidden_edges=_forbidden(args),
        latent=_quad(args.latent),
        triangles=triangles,
    )
    report = prune_pipeline(ms, opts)
    _emit(args, report.to_text(), report.to_dict())


def cmd_latent_check(args) -> None:
    ms = _load_all(args)
    table = build_correlation_table(ms, population=_population(args))
    verdict = latent_check(table, _quad(args.vars), args.tol)
    co = ", ".join(f"{k}={v:.6g}" for k, v in verdict.solved_coefficients.items())
    text = f"verdict: {verdict.verdict}\nresidual: {verdict.residual:.6g}\ntolerance: {verdict.tolerance:.3g}\n"
    if co:
        text += f"solved: {co}\n"
    _emit(args, text, verdict.to_dict())


def cmd_edge_check(args) -> None:
    ms = _load_all(args)
    table = build_correlation_table(ms, population=_population(args))
    verdict = redundant_edge_check(_triangle(args.left), _triangle(args.right), table, args.tol)
    u, v = verdict.edge
    text = (
        f"edge {u} -> {v}: {verdict.decision}\n"
        f"observed rho({u},{v}) {verdict.observed:.6g}, trek prediction {verdict.predicted:.6g}\n"
        f"residual {verdict.residual:.6g} (tolerance {verdict.tolerance:.3g})\n"
    )
    _emit(args, text, verdict.to_dict())


def cmd_plan(args) -> None:
    ms = _load_all(args)
    table = build_correlation_table(ms, population=_population(args))
    anchors = tuple(v.strip() for v in args.anchors.split(",")) if args.anchors else None
    report = plan(table, args.budget, anchors, args.tol)
    _emit(args, report.to_text(args.top), report.to_dict())


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--alpha", type=float, default=0.01, help="CI test level (default 0.01)")
    common.add_argument("--tol", type=float, default=None, help="absolute tolerance (default 1e-9 population, SE-based sample)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--population", action="store_true", help="treat correlations as exact")
    common.add_argument("--out", default=None, help="write output here instead of stdout")
    common.add_argument("--format", choices=("text", "json"), default="text")

    p = _Parser(prog="trekunify", description="Unify causal models from overlapping marginal datasets.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="sample marginal datasets from a graph file")
    s.add_argument("graph")
    s.add_argument("--sets", help="marginal variable sets, e.g. 'X,Y,A;X,Y,B'")
    s.add_argument("--n", type=int, default=10000)
    s.add_argument("--noise", choices=NOISE_FAMILIES, default="uniform")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("treks", parents=[common], help="list treks between two variables")
    s.add_argument("graph")
    s.add_argument("x")
    s.add_argument("y")
    s.set_defaults(func=cmd_treks)

    s = sub.add_parser("verify", parents=[common], help="compare trek sums with the implied covariance")
    s.add_argument("graph", nargs="?")
    s.add_argument("--random", type=int, default=1, help="number of random graphs when no graph is given")
    s.add_argument("--nodes", type=int, default=8, help="maximum nodes per random graph")
    s.set_defaults(func=cmd_verify)

    def with_manifest(name, func, help):
        s = sub.add_parser(name, parents=[common], help=help)
        s.add_argument("manifest", nargs="+", help="manifest file(s) or fixture:<name>")
        s.set_defaults(func=func)
        return s

    with_manifest("ci", cmd_ci, "extract conditional-independence statements")
    s = with_manifest("candidates", cmd_candidates, "enumerate candidate equivalence classes")
    s.add_argument("--no-faithfulness", action="store_true")
    s.add_argument("--forbid", action="append", metavar="U-V")
    s = with_manifest("prune", cmd_prune, "enumerate and prune with trek-rule constraints")
    s.add_argument("--no-faithfulness", action="store_true")
    s.add_argument("--forbid", action="append", metavar="U-V")
    s.add_argument("--latent", metavar="X1,X2,X3,X4", help="run the latent-connection check on these roles")
    s.add_argument("--triangles", nargs=2, metavar=("LEFT", "RIGHT"), help="run the redundant-edge check")
    s = with_manifest("latent-check", cmd_latent_check, "residual test for a hidden X2 - X3 connection")
    s.add_argument("--vars", default="X1,X2,X3,X4", metavar="X1,X2,X3,X4")
    s = sub.add_parser("edge-check", parents=[common], help="decide whether a direct X1 -> X4 edge is redundant")
    s.add_argument("left")
    s.add_argument("right")
    s.add_argument("manifest", nargs="+")
    s.set_defaults(func=cmd_edge_check)
    s = with_manifest("plan", cmd_plan, "propose future measurements")
    s.add_argument("--budget", type=int, default=3)
    s.add_argument("--anchors", help="comma-separated anchor variables (default: those known with every variable)")
    s.add_argument("--top", type=int, default=10)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("missing subcommand; see --help")
        _check_common(args)
        args.func(args)
    except UsageError as exc:
        print(f"trekunify: usage error: {exc}", file=sys.stderr)
        return 1
    except TrekUnifyError as exc:
        print(f"trekunify: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"trekunify: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

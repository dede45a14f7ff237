"""``ibgp`` command line: run a scenario, write CSV/JSON results and a manifest.

Exit codes: 0 ok, 1 property or bound violation detected, 2 usage or
configuration error, 3 budget refusal.  Outputs are computed in memory and
only written once everything succeeded, so a failing run leaves nothing
behind.  Existing output files are never overwritten.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import io
import json
import math
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .adaptive import EpisodeEnv, LambdaProfile, SweepResult, summarize_cell, sweep_cell
from .errors import BudgetExceeded, ConfigurationError, ShapeError
from .multitarget import (
    MultiTargetInstance,
    brute_force_select,
    check_selection,
    dispersion_runs,
    greedy_select,
    random_instance,
    run_multi_target,
    selection_table,
    summarize_dispersion,
)
from .protocol import OutcomeKind, ProtocolParams, child_seed, classify_outcome, run_protocol
from .sampling import CountObservations, outcome_counts, summarize
from .scenario import KINDS, attacker, load_scenario, protocol_params, round_dist
from . import sensor as sn
from .verifier import DEFAULT_BUDGET, enumerate_diagram, exhaustive_verify

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_BUDGET = 0, 1, 2, 3

DEFAULT_TRIALS = {
    "verify": 10_000,
    "simulate": 1_000,
    "sweep": 1_000,
    "multi-target": 1_000,
    "select": 200,
}


class Run:
    """Everything a command produced: files (name -> text) and a violation flag."""

    def __init__(self):
        self.files = {}
        self.violation = False
        self.summary = []

    def json(self, name, data):
        self.files[name] = json.dumps(_tidy(data), indent=2, sort_keys=True) + "\n"

    def csv(self, name, header, rows):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        self.files[name] = buf.getvalue()


def _g(x: float) -> str:
    return f"{x:.6g}"


def _tidy(value):
    """Floats to 6 significant digits, recursively."""
    if isinstance(value, float):
        if math.isnan(value):
            return None
        return float(_g(value))
    if isinstance(value, dict):
        return {str(k): _tidy(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_tidy(v) for v in value]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return _tidy(float(value))
    return value


def _chunks(total: int, jobs: int) -> list:
    """Contiguous index ranges; their union is ``range(total)`` whatever ``jobs`` is."""
    parts = max(1, min(jobs, total))
    edges = [total * i // parts for i in range(parts + 1)]
    return [range(edges[i], edges[i + 1]) for i in range(parts)]


def _map(fn, arglists, jobs: int) -> list:
    """Results in argument order, serially or on a process pool."""
    if jobs <= 1 or len(arglists) <= 1:
        return [fn(*args) for args in arglists]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *args) for args in arglists]
        return [f.result() for f in futures]


def _observations(params: ProtocolParams, spec):
    if not spec:
        return CountObservations(params.n, range(params.n + 1))
    if "fixed" in spec:
        if len(spec["fixed"]) != params.n:
            raise ConfigurationError(f"params/observations/fixed: need {params.n} entries, got {len(spec['fixed'])}")
        return np.asarray(spec["fixed"], dtype=np.uint8)
    return CountObservations(params.n, spec["counts"])


# commands ------------------------------------------------------------------


def cmd_verify(sc, seed, trials, budget, jobs) -> Run:
    p = sc.get("params", {})
    run = Run()
    params = protocol_params({"rounds": {"uniform": 3}, **p}, default_r_max=3)
    if p.get("lambdas") is not None and len(p["lambdas"]) != params.n:
        raise ConfigurationError(f"params/lambdas: need {params.n} entries, got {len(p['lambdas'])}")
    if p.get("mode", "exhaustive") == "exhaustive":
        report = exhaustive_verify(params, budget, lambdas=p.get("lambdas"))
        run.json("report.json", report.to_json())
        run.csv("report.csv", ["observers", "worst_probability", "bound"], [[r["observers"], r["worst_probability"], r["bound"]] for r in report.rows()])
        run.violation = report.violation
        run.summary.append(f"worst unsafe probability {report.worst_probability} (bound {report.bound})")
        return run
    obs = _observations(params, p.get("observations"))
    atk = attacker(p.get("attacker"))
    parts = _map(outcome_counts, [(params, obs, atk, ids, seed) for ids in _chunks(trials, jobs)], jobs)
    res = summarize(sum(parts, Counter()), trials)
    bound = params.round_dist.max_probability()
    run.json("report.json", {"instance": {"n": params.n, "t": params.t, "k": params.k, "lambda": params.lam,
                                          "round_distribution": params.round_dist.to_json()},
                             "bound": str(bound), **res.to_json()})
    run.csv("report.csv", ["outcome", "count", "rate", "half_width"],
            [[str(k), res.counts[k], _g(res.rates[k]), _g(res.half_widths[k])] for k in OutcomeKind])
    # only flag a violation the interval cannot explain
    run.violation = params.lam >= params.t and res.unsafe_rate - res.unsafe_half_width > float(bound)
    run.summary.append(f"unsafe rate {_g(res.unsafe_rate)} +/- {_g(res.unsafe_half_width)} over {trials} trials (bound {bound})")
    return run


def _simulate_chunk(params, obs, atk, ids, seed) -> list:
    source = obs if callable(obs) else (lambda rng: obs)
    rows = []
    for i in ids:
        o = source(np.random.default_rng(child_seed(seed, i, 0)))
        tr = run_protocol(params, o, atk, child_seed(seed, i, 1))
        out = classify_outcome(tr)
        rows.append([i, out.observers, tr.r_tot, out.acting_count, str(out.kind)])
    return rows


def cmd_simulate(sc, seed, trials, budget, jobs) -> Run:
    p = sc.get("params", {})
    params = protocol_params(p)
    if not params.feasible:
        raise ConfigurationError(f"params: infeasible instance n={params.n} < k+lambda={params.k + params.lam}")
    obs = _observations(params, p.get("observations"))
    atk = attacker(p.get("attacker"))
    rows = [r for part in _map(_simulate_chunk, [(params, obs, atk, ids, seed) for ids in _chunks(trials, jobs)], jobs) for r in part]
    run = Run()
    run.csv("trials.csv", ["trial", "observers", "r_tot", "acting", "outcome"], rows)
    res = summarize(Counter(OutcomeKind(r[4]) for r in rows), trials)
    run.json("summary.json", res.to_json())
    run.summary.append(f"{trials} trials, unsafe rate {_g(res.unsafe_rate)}")
    return run


def cmd_diagram(sc, seed, trials, budget, jobs) -> Run:
    p = sc.get("params", {})
    r_max = p.get("r_max", 3)
    params = ProtocolParams(p.get("n", 5), p.get("t", 1), p.get("k", 3), None, round_dist({"uniform": r_max}))
    result = enumerate_diagram(params, r_max)
    run = Run()
    run.files["diagram.csv"] = result.to_csv()
    run.json("witnesses.json", result.to_json())
    cells = result.mis_cells()
    run.violation = any(len(cells.get(f, ())) != 1 for f in result.witnesses if result.witnesses[f] is not None)
    run.summary.append("unsafe cells: " + ", ".join(f"{f}:{cells.get(f, [])}" for f in result.witnesses))
    return run


def _profiles(env: EpisodeEnv, lambdas) -> list:
    out = []
    for lam in lambdas:
        if isinstance(lam, list):
            if len(lam) != env.n:
                raise ConfigurationError(f"params/lambdas: per-agent profile needs {env.n} entries, got {len(lam)}")
            prof = LambdaProfile(tuple(lam))
        else:
            prof = LambdaProfile.uniform(env.n, lam)
        out.append((prof.label(), prof))
    return out


def cmd_sweep(sc, seed, trials, budget, jobs) -> Run:
    p = sc.get("params", {})
    env = EpisodeEnv(
        n=p.get("n", 6), k=p.get("k", 4), t=p.get("t", 2), horizon=p.get("horizon", 10),
        max_observers=p.get("max_observers", 6), round_dist=round_dist(p.get("rounds")),
        death_cost=float(p.get("death_cost", 1.0)),
    )
    specs = p.get("attackers") or [{"name": "all_one"}, {"name": "all_zero"}, {"name": "all_one_all_zero"}]
    attackers = [(s.get("label", s["name"]), attacker(s)) for s in specs]
    profiles = _profiles(env, p.get("lambdas", [0, 1, 2]))
    grid = {}
    for a_label, atk in attackers:
        for p_label, prof in profiles:
            parts = _map(sweep_cell, [(env, prof, atk, ids, seed) for ids in _chunks(trials, jobs)], jobs)
            grid[(a_label, p_label)] = summarize_cell(env, [r for part in parts for r in part])
    result = SweepResult(tuple(a for a, _ in attackers), tuple(q for q, _ in profiles), grid, p.get("metric", "success"))
    run = Run()
    run.files["sweep.csv"] = result.to_csv()
    run.json("sweep.json", result.to_json())
    run.summary.append(f"best worst-case profile {result.best_worst_case()}")
    return run


def _multi_chunk(inst, atk, lam, q, ids, seed) -> list:
    rows = []
    for i in ids:
        res = run_multi_target(inst, atk, lam, child_seed(seed, i), q=q)
        rows.append([i, res.r_tot, res.table_reward, _g(res.obtained_reward), res.mis_coordinated,
                     ";".join(str(o.kind) for o in res.outcomes)])
    return rows


def cmd_multi_target(sc, seed, trials, budget, jobs) -> Run:
    p = sc.get("params", {})
    run = Run()
    q = p.get("q")
    lam = p.get("lambda")
    if p.get("dispersion_check"):
        q = q or 31
        lam = 1 if lam is None else lam
        parts = _map(dispersion_runs, [(ids, seed, q, lam) for ids in _chunks(trials, jobs)], jobs)
        check = summarize_dispersion([c for part in parts for c in part], q=q, lam=lam)
        run.json("dispersion.json", check.to_json())
        run.csv("dispersion.csv", ["unsafe_targets", "runs"], list(enumerate(check.histogram)))
        run.violation = check.holding_fraction < check.required_fraction
        run.summary.append(f"{check.exceed}/{check.runs} runs over the limit {check.limit:g}, envelope {_g(check.envelope)}")
        return run
    if "instance" not in p:
        raise ConfigurationError("params: 'instance' is required unless dispersion_check is set")
    try:
        inst = MultiTargetInstance.from_json(p["instance"], round_dist(p.get("rounds")))
    except ShapeError as exc:
        raise ConfigurationError(f"params/instance: {exc}") from None
    atk = attacker(p.get("attacker"))
    rows = [r for part in _map(_multi_chunk, [(inst, atk, lam, q, ids, seed) for ids in _chunks(trials, jobs)], jobs) for r in part]
    run.csv("runs.csv", ["run", "r_tot", "table_reward", "obtained_reward", "unsafe_targets", "outcomes"], rows)
    mean = sum(r[2] for r in rows) / len(rows)
    run.json("summary.json", {"runs": len(rows), "mean_table_reward": mean,
                              "runs_with_unsafe_targets": sum(1 for r in rows if r[4])})
    run.summary.append(f"{len(rows)} runs, mean table reward {_g(mean)}")
    return run


def cmd_select(sc, seed, trials, budget, jobs) -> Run:
    p = sc.get("params", {})
    if p.get("instances"):
        try:
            instances = [MultiTargetInstance.from_json(d) for d in p["instances"]]
        except ShapeError as exc:
            raise ConfigurationError(f"params/instances: {exc}") from None
    else:
        spec = p.get("random", {})
        rng = np.random.default_rng(seed)
        count = spec.get("count", trials)
        instances = [random_instance(rng, spec.get("max_m", 8), spec.get("max_n", 12), spec.get("max_k", 4), spec.get("p", 0.5)) for _ in range(count)]
    budget = min(budget, 2**16)
    triples, problems, below = [], [], 0
    for idx, inst in enumerate(instances):
        g = greedy_select(inst)
        b = brute_force_select(inst, budget)
        triples.append((inst, g, b))
        problems += [f"instance {idx} greedy: {msg}" for msg in check_selection(inst, g)]
        problems += [f"instance {idx} optimal: {msg}" for msg in check_selection(inst, b)]
        if g.total_reward * inst.k_max < b.total_reward - 1e-12:
            below += 1
    run = Run()
    run.files["selection.csv"] = selection_table(triples)
    ratios = [1.0 if b.total_reward == 0 else g.total_reward / b.total_reward for _, g, b in triples]
    run.json("summary.json", {"instances": len(instances), "min_ratio": min(ratios), "below_one_over_k_max": below,
                              "invariant_violations": problems})
    run.violation = bool(problems) or below > 0
    run.summary.append(f"{len(instances)} instances, min greedy/optimal {_g(min(ratios))}, {below} below 1/k_max")
    return run


def _sensor_world(spec) -> tuple:
    spec = spec or {}
    preset = spec.get("preset", "default" if "positions" not in spec and "count" not in spec else None)
    if preset == "counterexample":
        base = sn.counterexample_world()
    elif preset == "small":
        base = sn.small_world()
    elif preset == "default":
        base = sn.default_world()
    else:
        base = None
    if "positions" in spec:
        positions = tuple(spec["positions"])
    elif "count" in spec:
        positions = tuple(i * spec.get("spacing", 1.0) for i in range(spec["count"]))
    else:
        positions = base.positions
    pick = lambda key, default: spec.get(key, getattr(base, key) if base is not None else default)
    world = sn.SensorWorld(
        positions,
        pick("sensing_radius", 2.0),
        pick("neighborhood_radius", 3.0),
        frozenset(spec.get("attacker_ids", base.attacker_ids if base is not None else ())),
        pick("grid_width", 0.5),
        pick("noise_bound", 0.2),
        pick("noise", "uniform"),
    )
    return world, preset


def cmd_sensor(sc, seed, trials, budget, jobs) -> Run:
    p = sc.get("params", {})
    world, preset = _sensor_world(p.get("world"))
    if "trajectory" in p:
        traj = sn.TargetTrajectory(tuple((w[0], w[1]) for w in p["trajectory"]))
    elif preset == "counterexample":
        traj = sn.counterexample_trajectory()
    elif preset == "small":
        traj = sn.small_trajectory()
    else:
        traj = sn.default_trajectory()
    default_horizon = {"counterexample": 5, "small": 2}.get(preset, sn.DEFAULT_HORIZON)
    horizon = p.get("horizon", default_horizon)
    mode = p.get("mode", "consensus")
    if "attacker" in p:
        atk = sn.attacker_from_config(p["attacker"])
    elif preset == "counterexample":
        atk = sn.counterexample_attacker()
    else:
        atk = sn.SensorAttacker()
    result = sn.simulate(world, traj, horizon, atk, mode, seed, round_dist(p.get("rounds")) if "rounds" in p else None)
    run = Run()
    run.files["sensor.csv"] = result.to_csv()
    first = result.first_contact()
    after = [s for s in result.steps if first is not None and s.t >= first]
    bad = [s.t for s in after if not s.consistent]
    exact = all(s.belief_std == 0 and s.belief_mean == s.discretized_signal for s in after)
    run.json("summary.json", {
        "mode": mode,
        "first_contact": first,
        "inconsistent_steps": bad,
        "exact_tracking": exact,
        "precondition_problems": world.precondition_problems(traj, horizon),
        "attacker": atk.describe(),
    })
    # inconsistency is what vanilla mode is run to exhibit, so only consensus mode can violate
    run.violation = mode == "consensus" and bool(bad)
    run.summary.append(f"{mode}: {len(bad)} inconsistent steps after first contact {first}")
    return run


COMMANDS = {
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "diagram": cmd_diagram,
    "sweep": cmd_sweep,
    "multi-target": cmd_multi_target,
    "select": cmd_select,
    "sensor": cmd_sensor,
}


# plumbing ------------------------------------------------------------------


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ibgp", description="Imperfect Byzantine generals experiments.")
    parser.add_argument("--version", action="version", version=f"ibgp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind, help=f"run a {kind} scenario")
        sp.add_argument("--scenario", type=Path, help="scenario JSON file (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="64-bit seed, overrides the scenario's")
        sp.add_argument("--trials", type=int, help="trial/episode/run count, overrides the scenario's")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--budget", type=int, help=f"exhaustive work budget (default {DEFAULT_BUDGET})")
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    return parser


def _fail(code: int, message: str) -> int:
    print(f"ibgp: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    kind = args.command
    started = time.perf_counter()
    if args.scenario is not None:
        try:
            text = args.scenario.read_text(encoding="utf-8")
        except OSError as exc:
            return _fail(EXIT_CONFIG, f"{args.scenario}: cannot read scenario: {exc.strerror}")
    else:
        text = json.dumps({"kind": kind})
    try:
        sc = load_scenario(text, kind)
    except ConfigurationError as exc:
        where = args.scenario if args.scenario is not None else "<default>"
        return _fail(EXIT_CONFIG, f"{where}: {exc}")
    seed = args.seed if args.seed is not None else sc.get("seed", 0)
    trials = args.trials if args.trials is not None else sc.get("trials", DEFAULT_TRIALS.get(kind, 1))
    budget = args.budget if args.budget is not None else sc.get("budget", DEFAULT_BUDGET)
    if not 0 <= seed < 2**64:
        return _fail(EXIT_CONFIG, f"--seed must be an unsigned 64-bit integer, got {seed}")
    if trials < 1 or budget < 1 or args.jobs < 1:
        return _fail(EXIT_CONFIG, "--trials, --budget and --jobs must be >= 1")
    if (args.out / "manifest.json").exists():
        return _fail(EXIT_CONFIG, f"{args.out}: refusing to overwrite existing output manifest.json")
    try:
        run = COMMANDS[kind](sc, seed, trials, budget, args.jobs)
    except BudgetExceeded as exc:
        return _fail(EXIT_BUDGET, f"refused: {exc}")
    except (ConfigurationError, ShapeError) as exc:
        return _fail(EXIT_CONFIG, str(exc))

    out = args.out
    clash = [name for name in [*run.files, "manifest.json"] if (out / name).exists()]
    if clash:
        return _fail(EXIT_CONFIG, f"{out}: refusing to overwrite existing output {', '.join(sorted(clash))}")
    payloads = {name: body.encode("utf-8") for name, body in run.files.items()}
    manifest = {
        "command": kind,
        "scenario_sha256": _digest(text.encode("utf-8")),
        "seed": seed,
        "trials": trials,
        "tool_version": __version__,
        "wall_time_seconds": round(time.perf_counter() - started, 3),
        "outputs": {name: _digest(data) for name, data in sorted(payloads.items())},
        "violation": run.violation,
    }
    payloads["manifest.json"] = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")
    try:
        out.mkdir(parents=True, exist_ok=True)
        for name, data in payloads.items():
            with open(out / name, "xb") as fh:
                fh.write(data)
    except OSError as exc:
        return _fail(EXIT_CONFIG, f"{exc.filename or out}: cannot write output: {exc.strerror}")
    for line in run.summary:
        print(line)
    if run.violation:
        print("violation detected", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

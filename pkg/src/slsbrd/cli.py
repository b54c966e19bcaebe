"""Command line entry point.

Subcommands: ``validate``, ``equilibrium``, ``simulate``, ``analyze`` and
``reproduce``.  Runs are described by a YAML or JSON file; see
``CONFIG_SCHEMA`` for the accepted keys.

Exit codes: 0 success, 2 infeasible, 3 diverged or not converged, 4 bad config.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import __version__
from .analysis import empirical_lipschitz, game_lipschitz
from .best_response import InfeasibleResponse, epsilon_gap, player_costs
from .brd_engine import BrdConfig, DivergenceError, dpg_reference, extract_policies, is_potential_game, run
from .game_model import GENERATORS, GameSpec, ModelError, validate_assumptions
from .robust_constraints import compile_constraints, dump_text
from .simulate import (Impulse, UniformBall, Zero, closed_loop_run, closed_loop_spectral_radius,
                       constraint_violations, market_disturbance_script)
from .sls_core import FirKernel, StrategyProfile

EXIT_OK, EXIT_INFEASIBLE, EXIT_DIVERGED, EXIT_CONFIG = 0, 2, 3, 4

_NUM = {"type": "number"}
_INT = {"type": "integer"}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["game"],
    "properties": {
        "game": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "generator": {"enum": sorted(GENERATORS)},
                "params": {"type": "object"},
                "spec": {"type": "object"},
                "file": {"type": "string"},
            },
            "oneOf": [{"required": ["generator"]}, {"required": ["spec"]}, {"required": ["file"]}],
        },
        "brd": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eta": _NUM, "delta_T": _INT, "N": _INT, "gamma": {"type": ["number", "null"]},
                "stop_rel_tol": _NUM, "max_updates": _INT, "exact_fir": {"type": "boolean"},
                "structure": {"type": "boolean"}, "d_a": _INT, "d_s": _INT,
                "solver_max_iters": _INT,
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "T": _INT,
                "noise": {"enum": ["uniform", "script", "zero", "impulse"]},
                "impulse_index": _INT,
                "window": {"type": "array", "items": _INT, "minItems": 2, "maxItems": 2},
                "open_loop": {"type": "boolean"},
            },
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"samples": _INT},
        },
        "reference": {"enum": ["none", "dpg"]},
        "out": {"type": "string"},
        "seed": _INT,
    },
}

DEFAULT_SIMULATION = {"T": 600, "noise": "uniform", "impulse_index": 0, "window": [550, 600], "open_loop": False}


class ConfigError(ValueError):
    pass


# -----------------------------------------------------------------------------
# Configuration
# -----------------------------------------------------------------------------


def load_config(path) -> dict:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return check_config(data)


def check_config(data) -> dict:
    try:
        jsonschema.validate(data, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    return data


def build_game(cfg: dict, seed: int | None = None) -> GameSpec:
    game = cfg["game"]
    try:
        if "generator" in game:
            params = dict(game.get("params", {}))
            if game["generator"] == "market" and seed is not None:
                params["rng_seed"] = seed
            return GENERATORS[game["generator"]](**params)
        if "spec" in game:
            return GameSpec.from_dict(game["spec"])
        return GameSpec.load_json(game["file"])
    except TypeError as exc:
        raise ConfigError(f"bad generator parameters: {exc}") from exc
    except (ModelError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid game: {exc}") from exc


def build_brd(cfg: dict, args=None) -> BrdConfig:
    opts = dict(cfg.get("brd", {}))
    if args is not None:
        if getattr(args, "exact_fir", False):
            opts["exact_fir"] = True
        if getattr(args, "max_updates", None) is not None:
            opts["max_updates"] = args.max_updates
    opts["rng_seed"] = cfg.get("seed", 0)
    try:
        return BrdConfig(**opts)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob + __version__.encode()).hexdigest()[:16]


def _out_dir(cfg: dict, args) -> Path:
    out = Path(args.out or cfg.get("out") or "slsbrd-run")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj)}")


# -----------------------------------------------------------------------------
# Kernel files
# -----------------------------------------------------------------------------


def save_kernels(path: Path, profile: StrategyProfile, policies) -> None:
    arrays = {"phi_x": profile.phi_x_joint.taps}
    for p, k in enumerate(profile.phi_u):
        arrays[f"phi_u_{p}"] = k.taps
        arrays[f"phi_x_copy_{p}"] = profile.phi_x_per_player[p].taps
        arrays[f"policy_{p}"] = policies[p].taps.taps
    np.savez(path, **arrays)


def load_kernels(path: Path, spec: GameSpec) -> tuple[StrategyProfile, list]:
    data = np.load(path)
    phi_u = [FirKernel(data[f"phi_u_{p}"]) for p in range(spec.n_players)]
    copies = [FirKernel(data[f"phi_x_copy_{p}"]) for p in range(spec.n_players)]
    profile = StrategyProfile.from_phi_u(spec, phi_u, copies)
    return profile, extract_policies(profile)


# -----------------------------------------------------------------------------
# Subcommands
# -----------------------------------------------------------------------------


def cmd_validate(cfg: dict, args) -> int:
    spec = build_game(cfg, args.seed)
    brd = build_brd(cfg, args)
    report = validate_assumptions(spec)
    out = {"game": spec.name, "assumptions": report.to_dict()}
    try:
        compiled = {p: len(compile_constraints(spec, brd.N, player=p)) for p in range(spec.n_players)}
        out["compiled_rows"] = compiled
    except ModelError as exc:
        out["compiled_rows"] = f"error: {exc}"
    lip = game_lipschitz(spec, brd.N)
    out["lipschitz"] = lip.to_dict()
    out["predicted_rate"] = lip.predicted_rate(brd.eta)
    out["potential_game"] = is_potential_game(spec)
    if not out["potential_game"]:
        out.setdefault("notes", []).append("not a potential game: no centralized reference available")
    print(json.dumps(out, indent=2, default=_jsonable))
    return EXIT_OK if report.passed else EXIT_CONFIG


def _equilibrium(spec, brd, out: Path, reference_kind: str, cfg: dict, dump: bool = False) -> tuple[int, dict]:
    reference = None
    summary = {"game": spec.name, "version": __version__, "config_hash": _config_hash(cfg),
               "seed": cfg.get("seed", 0), "config": cfg}
    _write_json(out / "config.json", cfg)
    if dump:
        compiled = compile_constraints(spec, brd.N, layout=None)
        (out / "constraints.txt").write_text(dump_text(compiled) + "\n")
    if reference_kind == "dpg":
        try:
            reference = dpg_reference(spec, brd)
        except ModelError as exc:
            summary["reference_error"] = str(exc)
            _write_json(out / "summary.json", summary)
            print(f"reference rejected: {exc}", file=sys.stderr)
            return EXIT_CONFIG, summary
    try:
        result = run(spec, brd, reference=reference)
    except InfeasibleResponse as exc:
        summary.update(status="infeasible", message=str(exc))
        if getattr(exc, "log", None) is not None:
            exc.log.to_csv(out / "convergence.csv")
        _write_json(out / "summary.json", summary)
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE, summary
    except DivergenceError as exc:
        summary.update(status="diverged", message=str(exc))
        exc.log.to_csv(out / "convergence.csv")
        _write_json(out / "summary.json", summary)
        return EXIT_DIVERGED, summary
    profile, policies, itlog = result
    itlog.to_csv(out / "convergence.csv")
    save_kernels(out / "kernels.npz", profile, policies)
    costs = player_costs(spec, profile.phi_u)
    gamma = brd.gamma or 0.0
    lip = game_lipschitz(spec, brd.N)
    summary.update(
        status="converged" if result.converged else "max_updates",
        updates=result.updates,
        costs=costs,
        epsilon_gap=epsilon_gap(spec, profile.phi_u, gamma),
        epsilon_gap_geometric=float(gamma / (1.0 - gamma) * costs.max()) if gamma < 1 else None,
        terminal_sq=float(np.sum(profile.phi_x_joint.taps[-1] ** 2)),
        lipschitz=lip.to_dict(),
        predicted_rate=lip.predicted_rate(brd.eta),
        spectral_radius=closed_loop_spectral_radius(spec, policies),
    )
    if reference is not None:
        summary["distance_to_reference"] = float(itlog.distance_to_reference()[-1])
    _write_json(out / "summary.json", summary)
    print(f"{summary['status']} after {result.updates} updates; epsilon gap {summary['epsilon_gap']:.6g}")
    return (EXIT_OK if result.converged else EXIT_DIVERGED), summary


def cmd_equilibrium(cfg: dict, args) -> int:
    spec = build_game(cfg, args.seed)
    brd = build_brd(cfg, args)
    out = _out_dir(cfg, args)
    ref = args.reference or cfg.get("reference", "none")
    code, _ = _equilibrium(spec, brd, out, ref, cfg, dump=args.dump_constraints)
    return code


def _simulate(spec, policies, sim: dict, seed: int, out: Path, name: str = "trajectory.csv") -> dict:
    T = int(sim["T"])
    kind = sim["noise"]
    if kind == "uniform":
        noise = UniformBall(spec.noise, seed)
    elif kind == "script":
        noise = market_disturbance_script()
    elif kind == "impulse":
        noise = Impulse(int(sim.get("impulse_index", 0)))
    else:
        noise = Zero()
    traj = closed_loop_run(spec, policies, T, noise)
    lo, hi = sim.get("window", [0, T])
    header = {"seed": seed, "noise": json.dumps(noise.describe()), "window": f"({lo}, {hi}]"}
    view = traj
    if hi < T:
        view = type(traj)(traj.x[:hi + 1], [u[:hi] for u in traj.u], traj.w[:hi], traj.costs[:hi],
                          traj.unstable, traj.seed)
    view.to_csv(out / name, start=min(lo + 1, hi), header=header)
    viol = constraint_violations(spec, traj)
    return {"file": name, "unstable": traj.unstable, "violations": viol,
            "max_abs_state": float(np.nanmax(np.abs(traj.x))),
            "dynamics_residual": traj.dynamics_residual(spec) if not traj.unstable else None}


def cmd_simulate(cfg: dict, args) -> int:
    spec = build_game(cfg, args.seed)
    brd = build_brd(cfg, args)
    out = _out_dir(cfg, args)
    sim = {**DEFAULT_SIMULATION, **cfg.get("simulation", {})}
    kernels = Path(args.kernels) if args.kernels else out / "kernels.npz"
    if kernels.is_dir():
        kernels = kernels / "kernels.npz"
    if not kernels.exists():
        code, _ = _equilibrium(spec, brd, out, "none", cfg)
        if code != EXIT_OK:
            return code
        kernels = out / "kernels.npz"
    _, policies = load_kernels(kernels, spec)
    seed = cfg.get("seed", 0) if args.seed is None else args.seed
    report = {"closed_loop": _simulate(spec, policies, sim, seed, out)}
    if sim.get("open_loop"):
        report["open_loop"] = _simulate(spec, [None] * spec.n_players, sim, seed, out, "trajectory_open_loop.csv")
    report["spectral_radius"] = closed_loop_spectral_radius(spec, policies)
    _write_json(out / "simulation.json", report)
    print(json.dumps(report, indent=2, default=_jsonable))
    return EXIT_DIVERGED if report["closed_loop"]["unstable"] else EXIT_OK


def cmd_analyze(cfg: dict, args) -> int:
    spec = build_game(cfg, args.seed)
    brd = build_brd(cfg, args)
    report = game_lipschitz(spec, brd.N)
    samples = cfg.get("analysis", {}).get("samples", 0)
    if samples:
        report.empirical, _ = empirical_lipschitz(spec, brd, samples, cfg.get("seed", 0), constrained=False)
    data = report.to_dict()
    data["predicted_rate"] = report.predicted_rate(brd.eta)
    print(json.dumps(data, indent=2, default=_jsonable))
    return EXIT_OK


REPRODUCTIONS = {
    "chain": [
        {"name": f"beta_{'_'.join(str(b) for b in betas)}",
         "config": {"game": {"generator": "chain", "params": {"n_nodes": 14, "betas": list(betas)}},
                    "brd": {"eta": 0.5, "delta_T": 1, "N": 50, "gamma": 0.95, "stop_rel_tol": 1e-8},
                    "simulation": {"T": 600, "noise": "uniform", "window": [550, 600]},
                    "reference": "dpg"}}
        for betas in ((10, 40, 10), (2, 8, 2), (0.4, 1.6, 0.4))
    ],
    "market": [
        {"name": "market",
         "config": {"game": {"generator": "market", "params": {"tau": 1.2, "dt": 0.25, "u_avg": 0.5}},
                    "brd": {"eta": 0.25, "delta_T": 1, "N": 16, "gamma": 0.95, "stop_rel_tol": 1e-8,
                            "structure": False},
                    "simulation": {"T": 400, "noise": "script", "window": [260, 400], "open_loop": True},
                    "reference": "none"}}
    ],
}


def cmd_reproduce(args) -> int:
    root = Path(args.out or f"reproduce-{args.experiment}")
    root.mkdir(parents=True, exist_ok=True)
    worst = EXIT_OK
    index = []
    for item in REPRODUCTIONS[args.experiment]:
        cfg = copy.deepcopy(item["config"])
        cfg["seed"] = 0 if args.seed is None else args.seed
        if args.max_updates is not None:
            cfg["brd"]["max_updates"] = args.max_updates
        out = root / item["name"]
        out.mkdir(exist_ok=True)
        spec = build_game(cfg, cfg["seed"])
        brd = build_brd(cfg)
        code, summary = _equilibrium(spec, brd, out, cfg["reference"], cfg)
        entry = {"name": item["name"], "exit": code, "updates": summary.get("updates")}
        if code == EXIT_OK:
            _, policies = load_kernels(out / "kernels.npz", spec)
            sim = {**DEFAULT_SIMULATION, **cfg["simulation"]}
            report = {"closed_loop": _simulate(spec, policies, sim, cfg["seed"], out)}
            if sim.get("open_loop"):
                report["open_loop"] = _simulate(spec, [None] * spec.n_players, sim, cfg["seed"], out,
                                                "trajectory_open_loop.csv")
            _write_json(out / "simulation.json", report)
        worst = max(worst, code)
        index.append(entry)
    _write_json(root / "index.json", index)
    print(json.dumps(index, indent=2))
    return worst


# -----------------------------------------------------------------------------
# Entry point
# -----------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slsbrd", description="Feedback equilibria of constrained LQ games.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML or JSON run description")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--exact-fir", action="store_true", help="force the terminal tap to zero")
        p.add_argument("--max-updates", type=int)

    common(sub.add_parser("validate", help="check assumptions and compile constraints"))
    p = sub.add_parser("equilibrium", help="run best-response dynamics")
    common(p)
    p.add_argument("--reference", choices=["none", "dpg"])
    p.add_argument("--dump-constraints", action="store_true")
    p = sub.add_parser("simulate", help="closed-loop simulation of saved or fresh kernels")
    common(p)
    p.add_argument("--kernels", help="kernels file or run directory")
    common(sub.add_parser("analyze", help="Lipschitz constants and predicted rate"))
    p = sub.add_parser("reproduce", help="run a complete experiment bundle")
    p.add_argument("experiment", choices=sorted(REPRODUCTIONS))
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-updates", type=int)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        if args.command == "reproduce":
            return cmd_reproduce(args)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        handler = {"validate": cmd_validate, "equilibrium": cmd_equilibrium,
                   "simulate": cmd_simulate, "analyze": cmd_analyze}[args.command]
        return handler(cfg, args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

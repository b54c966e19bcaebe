"""Relaxed simultaneous best-response dynamics over system responses.

Every round all players compute their best response to the profile at the
start of the round, then move a fraction ``eta`` towards it.  The loop stops
once the largest relative update falls below ``stop_rel_tol``.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .best_response import (BestResponder, ConstraintAssembly, HessianBlocks, InfeasibleResponse,
                            ResponseOptions, assemble_hessians, objective_value)
from .game_model import GameSpec, ModelError, StructuralPattern, delay_sparsity
from .layout import DecisionLayout
from .qp_solver import SolverCache, Status, project_feasible, solve
from .robust_constraints import compile_constraints
from .sls_core import FirKernel, PolicyKernel, StrategyProfile, policy_kernel, propagate_phi_x


class DivergenceError(RuntimeError):
    """Iterates became non-finite."""


@dataclass
class BrdConfig:
    """Settings of one equilibrium-seeking run.

    ``gamma=None`` drops the terminal-tap bound altogether (used for games
    whose equilibrium is compared against an unconstrained closed form).
    ``structure`` toggles the delay-induced sparsity masks; a pattern stored
    on the game itself takes precedence.
    """

    eta: float = 0.5
    delta_T: int = 1
    N: int = 50
    gamma: float | None = 0.95
    stop_rel_tol: float = 1e-8
    max_updates: int = 5000
    exact_fir: bool = False
    structure: bool = True
    d_a: int = 1
    d_s: int = 1
    rng_seed: int = 0
    solver_tol: dict | None = None
    solver_max_iters: int = 50000

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0 and self.eta != 1.0:
            raise ValueError(f"learning rate must lie in (0, 1], got {self.eta}")
        if self.delta_T < 1:
            raise ValueError("stages per update must be at least 1")
        if self.N < 2:
            raise ValueError("FIR horizon must be at least 2")
        if not self.exact_fir and self.gamma is not None and not 0.0 < self.gamma < 1.0:
            raise ValueError(f"terminal bound must lie in (0, 1), got {self.gamma}")
        if self.max_updates < 0:
            raise ValueError("max_updates must be nonnegative")

    def pattern(self, spec: GameSpec) -> StructuralPattern | None:
        if spec.structure is not None:
            return spec.structure
        if self.structure:
            return delay_sparsity(spec, self.d_a, self.d_s, self.N)
        return None

    def response_options(self, spec: GameSpec, pattern=None) -> ResponseOptions:
        return ResponseOptions(self.N, self.gamma, self.exact_fir,
                               pattern if pattern is not None else self.pattern(spec),
                               self.solver_tol, self.solver_max_iters)


LOG_FIELDS = ("k", "stage", "player", "rel_update", "dist_ref", "phi_x_gap", "cost", "eps_gap",
              "terminal_sq", "solver_status", "solver_iters", "polished", "solve_seconds")


@dataclass
class IterationLog:
    """One row per update ``k`` and player ``p``.

    Row ``k`` describes the profile after ``k`` updates (``k = 0`` is the
    initial profile, whose update metrics are blank).
    """

    rows: list = field(default_factory=list)
    status: str = "running"
    message: str = ""

    def append(self, **row) -> None:
        self.rows.append({key: row.get(key, math.nan) for key in LOG_FIELDS})

    def column(self, name: str, player: int | None = None) -> np.ndarray:
        return np.array([r[name] for r in self.rows if player is None or r["player"] == player], dtype=float)

    @property
    def n_updates(self) -> int:
        return max((r["k"] for r in self.rows), default=0)

    def max_rel_update(self) -> np.ndarray:
        """Largest relative update per round ``k = 1..``."""
        out = np.full(self.n_updates, np.nan)
        for r in self.rows:
            if r["k"] >= 1:
                out[r["k"] - 1] = np.nanmax([out[r["k"] - 1], r["rel_update"]])
        return out

    def distance_to_reference(self) -> np.ndarray:
        """Joint distance to the reference per round ``k = 0..`` (root sum over players)."""
        out = np.zeros(self.n_updates + 1)
        for r in self.rows:
            out[r["k"]] += r["dist_ref"] ** 2
        return np.sqrt(out)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
            for r in self.rows:
                writer.writerow(r)


@dataclass
class BrdResult:
    profile: StrategyProfile
    policies: list
    log: IterationLog
    converged: bool
    updates: int

    def __iter__(self):
        return iter((self.profile, self.policies, self.log))


def _potential_weights(spec: GameSpec) -> np.ndarray | None:
    """Unit weights when all players share one state penalty and no cross input penalties."""
    C0 = spec.C[0]
    if not np.any(C0):
        return None
    for p, Cp in enumerate(spec.C):
        if Cp.shape != C0.shape or np.max(np.abs(Cp - C0)) > 1e-12 * max(1.0, np.max(np.abs(C0))):
            return None
        for q in range(spec.n_players):
            if q != p and np.any(spec.D[p][q] != 0.0):
                return None
    return np.ones(spec.n_players)


def is_potential_game(spec: GameSpec) -> bool:
    """Whether every cost shares one state penalty and no cross input penalties."""
    return _potential_weights(spec) is not None


class JointProblem:
    """All players' coordinates in one program, used for projections and the potential."""

    def __init__(self, spec: GameSpec, config: BrdConfig, pattern=None):
        self.spec = spec
        self.pattern = pattern if pattern is not None else config.pattern(spec)
        self.layout = DecisionLayout(spec, config.N, self.pattern)
        compiled = compile_constraints(spec, config.N, layout=self.layout)
        self.assembly = ConstraintAssembly(self.layout, compiled, list(range(spec.n_players)),
                                           config.gamma, config.exact_fir)
        self.config = config

    def _program(self, Qv, qv):
        asm = self.assembly
        asm.set_objective(Qv)
        prog, issue = asm.program(np.zeros(self.layout.size), qv)
        if issue:
            raise InfeasibleResponse(issue)
        return prog

    def _checked(self, res, what: str):
        if res.status == Status.INFEASIBLE:
            raise InfeasibleResponse(f"{what}: {res.message or 'no feasible point'}", None, res)
        return res

    def _solve(self, Qv, qv, what: str):
        prog = self._program(Qv, qv)
        res = solve(prog, tol=self.config.solver_tol, max_iters=self.config.solver_max_iters, cache=SolverCache())
        return self._checked(res, what)

    def projection(self, reference: np.ndarray | None = None):
        """Closest feasible point to ``reference`` in the players' coordinates."""
        n = self.layout.size
        prog = self._program(sp.csr_matrix((n, n)), np.zeros(n))
        ref = np.zeros(prog.n)
        if reference is not None:
            ref[:n] = reference
        weights = np.zeros(prog.n)
        weights[:n] = 1.0
        res = project_feasible(prog, ref, weights, tol=self.config.solver_tol,
                               max_iters=self.config.solver_max_iters)
        return self._checked(res, "projection")

    def potential(self, weights: np.ndarray):
        """Minimize ``sum_n ||C Phi_{x,n}||^2 + sum_p ||D^{pp} Phi^p_{u,n}||^2 / w_p^2``."""
        spec, lay = self.spec, self.layout
        C = spec.C[0]
        W = sp.kron(sp.identity(spec.state_dim * lay.N), sp.csr_matrix(C.T @ C), format="csr")
        Lx = lay.joint_state_map
        blocks = []
        for p in range(spec.n_players):
            Dp = spec.D[p][p]
            Kp = sp.kron(sp.identity(spec.state_dim * (lay.N - 1)), sp.csr_matrix(Dp.T @ Dp))
            Sel = lay.selection(p)
            blocks.append((Sel.T @ Kp @ Sel) / weights[p] ** 2)
        Qv = 2.0 * (Lx.T @ W @ Lx + sp.block_diag(blocks))
        qv = 2.0 * (Lx.T @ (W @ lay.free_state))
        return self._solve(sp.csr_matrix(Qv), qv, "potential minimization")


def initial_profile(spec: GameSpec, config: BrdConfig, pattern=None) -> StrategyProfile:
    """Projection of the all-zero input responses onto the joint feasible set.

    Zero is returned unchanged when it is feasible.  For open-loop unstable
    dynamics the terminal-tap bound excludes zero and the projection moves it
    to the nearest point satisfying every row jointly.
    """
    problem = JointProblem(spec, config, pattern)
    lay = problem.layout
    res = problem.projection()
    if not res.ok:
        raise InfeasibleResponse(f"projection did not converge ({res.status.value})", None, res)
    phi_u = lay.split(res.x[:lay.size])
    return StrategyProfile.from_phi_u(spec, phi_u)


def dpg_reference(spec: GameSpec, config: BrdConfig, pattern=None) -> StrategyProfile:
    """Equilibrium of a potential game obtained from one centralized program."""
    weights = _potential_weights(spec)
    if weights is None:
        raise ModelError("game is not a potential game: costs need a common state penalty "
                         "and no cross input penalties", "C/D")
    problem = JointProblem(spec, config, pattern)
    lay = problem.layout
    res = problem.potential(weights)
    if not res.ok:
        raise InfeasibleResponse(f"centralized program did not converge ({res.status.value})", None, res)
    return StrategyProfile.from_phi_u(spec, lay.split(res.x[:lay.size]))


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    nb = np.linalg.norm(a)
    d = np.linalg.norm(a - b)
    return float(d / nb) if nb > 0 else float(d)


def extract_policies(profile: StrategyProfile, L: int | None = None) -> list[PolicyKernel]:
    return [policy_kernel(k, profile.phi_x_joint, L) for k in profile.phi_u]


def run(spec: GameSpec, config: BrdConfig, reference: StrategyProfile | None = None,
        initial: StrategyProfile | None = None, callback=None) -> BrdResult:
    """Iterate relaxed simultaneous best responses until the updates stall.

    Parameters
    ----------
    spec : GameSpec
    config : BrdConfig
    reference : StrategyProfile, optional
        Known equilibrium; distances to it are logged when given.
    initial : StrategyProfile, optional
        Starting profile; the projection of zero by default.
    callback : callable, optional
        Called as ``callback(k, profile)`` after every update.

    Raises
    ------
    InfeasibleResponse
        A best response has no feasible point.  The partial log is attached
        as the ``log`` attribute of the exception.
    DivergenceError
        Iterates became non-finite.
    """
    pattern = config.pattern(spec)
    options = config.response_options(spec, pattern)
    hess: HessianBlocks = assemble_hessians(spec, config.N)
    layout = DecisionLayout(spec, config.N, pattern)
    responders = [BestResponder(spec, p, options, hess, layout) for p in range(spec.n_players)]
    profile = initial if initial is not None else initial_profile(spec, config, pattern)
    log = IterationLog()
    eta = config.eta
    gamma = config.gamma if config.gamma is not None else 0.0

    def record(k, prof, rel=None, stats=None):
        phi_u = prof.phi_u
        costs = [objective_value(spec, p, phi_u) for p in range(spec.n_players)]
        eps = gamma * max(costs)
        for p in range(spec.n_players):
            px = prof.phi_x_per_player[p].taps
            row = dict(k=k, stage=k * config.delta_T, player=p, cost=costs[p], eps_gap=eps,
                       phi_x_gap=_rel(px, prof.phi_x_joint.taps), terminal_sq=float(np.sum(px[-1] ** 2)))
            if rel is not None:
                row["rel_update"] = rel[p]
            if reference is not None:
                row["dist_ref"] = float(np.linalg.norm(phi_u[p].taps - reference.phi_u[p].taps))
            if stats is not None:
                res, secs = stats[p]
                row.update(solver_status=res.status.value, solver_iters=res.iterations,
                           polished=int(res.polished), solve_seconds=secs)
            log.append(**row)

    record(0, profile)
    converged = False
    k = 0
    while k < config.max_updates:
        old = profile.phi_u
        brs, stats = [], []
        for p, responder in enumerate(responders):
            t0 = time.perf_counter()
            try:
                kernel, res = responder.solve(old)
            except InfeasibleResponse as exc:
                log.status, log.message = "infeasible", str(exc)
                exc.log = log
                raise
            stats.append((res, time.perf_counter() - t0))
            brs.append(kernel)
        new = [FirKernel((1.0 - eta) * o.taps + eta * b.taps) for o, b in zip(old, brs)]
        if not all(np.all(np.isfinite(n.taps)) for n in new):
            log.status, log.message = "diverged", f"non-finite iterate at update {k + 1}"
            err = DivergenceError(log.message)
            err.log = log
            raise err
        copies = []
        for p in range(spec.n_players):
            mixed = list(old)
            mixed[p] = new[p]
            copies.append(propagate_phi_x(spec, mixed, config.N))
        profile = StrategyProfile.from_phi_u(spec, new, copies)
        k += 1
        rel = [_rel(n.taps, o.taps) for n, o in zip(new, old)]
        record(k, profile, rel, stats)
        if callback is not None:
            callback(k, profile)
        if max(rel) <= config.stop_rel_tol:
            converged = True
            break
    log.status = "converged" if converged else "max_updates"
    return BrdResult(profile, extract_policies(profile), log, converged, k)

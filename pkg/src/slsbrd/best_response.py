"""Best-response programs over finite impulse responses.

Player ``p`` chooses its input response ``Phi_u^p`` (taps 1..N-1) to minimize

    sum_{n<N} ( ||C^p Phi_{x,n}||_F^2 + ||sum_q D^{pq} Phi^q_{u,n}||_F^2 ) + ||C^p Phi_{x,N}||_F^2

with ``Phi_x`` generated from all players' responses, subject to the robust
constraint rows, the structural masks and either ``||Phi_{x,N}||_F^2 <= gamma``
or ``Phi_{x,N} = 0``.  ``Phi_x`` is substituted as an affine function of the
player's own taps, so the program only carries those taps plus the epigraph
variables of the robust rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .game_model import GameSpec, StructuralPattern
from .layout import DecisionLayout, free_response, response_operator
from .qp_solver import BallConstraint, ConicProgram, SocBlock, SolveResult, SolverCache, Status, solve
from .robust_constraints import CompiledConstraints, compile_constraints
from .sls_core import FirKernel, propagate_phi_x


class InfeasibleResponse(RuntimeError):
    """A player's best-response program has no feasible point."""

    def __init__(self, message: str, player: int | None = None, result: SolveResult | None = None):
        prefix = "joint problem" if player is None else f"player {player}"
        super().__init__(f"{prefix}: {message}")
        self.player = player
        self.result = result


# -----------------------------------------------------------------------------
# Hessian operators
# -----------------------------------------------------------------------------


def _block_apply(M: np.ndarray, F: np.ndarray, blocks: int) -> np.ndarray:
    """``(I_blocks kron M) @ F`` without forming the Kronecker product."""
    r, c = M.shape
    return np.einsum("zx,bxm->bzm", M, F.reshape(blocks, c, -1)).reshape(blocks * r, -1)


@dataclass
class HessianBlocks:
    """Quadratic-form data of every player's cost over stacked tap coordinates.

    Coordinates of player ``q`` are the ``(N-1) N_u^q`` entries of one column
    of ``Phi_u^q`` (tap-major).  The cost of player ``p`` is, column by column,
    ``||sum_q G[p][q] v_q + G0[p] e_j||^2`` so that ``H[p][q] = G[p][p]' G[p][q]``
    and ``H0[p] = G[p][p]' G0[p]``.  Stacking the state and input penalties
    separately keeps this identical to the tap-wise cost even when the
    orthogonality assumption fails.
    """

    N: int
    F: list
    F0: np.ndarray
    G: list
    G0: list
    H: list
    H0: list

    @property
    def n_players(self) -> int:
        return len(self.F)

    def coupling(self, p: int) -> np.ndarray:
        """``H^{p,-p}``: the blocks ``H[p][q]``, ``q != p``, side by side."""
        blocks = [self.H[p][q] for q in range(self.n_players) if q != p]
        if not blocks:
            return np.zeros((self.H[p][p].shape[0], 0))
        return np.hstack(blocks)


def assemble_hessians(spec: GameSpec, N: int) -> HessianBlocks:
    """Dense Hessian blocks of all players' costs for FIR horizon ``N``."""
    if N < 2:
        raise ValueError("FIR horizon must be at least 2")
    npl = spec.n_players
    F = [response_operator(spec.A, B, N) for B in spec.B]
    F0 = free_response(spec.A, N)
    G, G0, H, H0 = [], [], [], []
    for p in range(npl):
        Cp = spec.C[p]
        rows = []
        for q in range(npl):
            state = _block_apply(Cp, F[q], N)
            inputs = np.kron(np.eye(N - 1), spec.D[p][q])
            rows.append(np.vstack([state, inputs]))
        g0 = np.vstack([_block_apply(Cp, F0, N), np.zeros(((N - 1) * spec.output_dim, spec.state_dim))])
        G.append(rows)
        G0.append(g0)
        Hp = []
        for q in range(npl):
            Hpq = rows[p].T @ rows[q]
            if q == p:
                Hpq = 0.5 * (Hpq + Hpq.T)
            Hp.append(Hpq)
        H.append(Hp)
        H0.append(rows[p].T @ g0)
    return HessianBlocks(N, F, F0, G, G0, H, H0)


def _as_matrix(k: FirKernel) -> np.ndarray:
    """Taps ``(N-1, N_u, N_x)`` as the ``((N-1) N_u, N_x)`` coordinate matrix."""
    return k.taps.reshape(-1, k.cols)


def _from_matrix(V: np.ndarray, nu: int, nx: int) -> FirKernel:
    return FirKernel(V.reshape(-1, nu, nx))


def objective_value(spec: GameSpec, p: int, phi_u, include_terminal: bool = True) -> float:
    """Cost of player ``p`` evaluated tap by tap from the responses."""
    N = phi_u[0].horizon + 1
    phi_x = propagate_phi_x(spec, phi_u, N)
    Cp = spec.C[p]
    last = N if include_terminal else N - 1
    val = sum(np.sum((Cp @ phi_x.taps[n]) ** 2) for n in range(last))
    for n in range(N - 1):
        acc = sum(spec.D[p][q] @ phi_u[q].taps[n] for q in range(spec.n_players))
        val += np.sum(acc ** 2)
    return float(val)


def quadratic_cost(hess: HessianBlocks, spec: GameSpec, p: int, phi_u) -> float:
    """Cost of player ``p`` through the Hessian factors (cross-check of ``objective_value``)."""
    r = hess.G0[p].copy()
    for q, k in enumerate(phi_u):
        r += hess.G[p][q] @ _as_matrix(k)
    return float(np.sum(r ** 2))


def unconstrained_best_response(p: int, hess: HessianBlocks, phi_u) -> FirKernel:
    """Minimizer of player ``p``'s cost without constraints or masks."""
    rhs = hess.H0[p].copy()
    for q, k in enumerate(phi_u):
        if q != p:
            rhs += hess.H[p][q] @ _as_matrix(k)
    V = -np.linalg.solve(hess.H[p][p], rhs)
    ref = phi_u[p]
    return _from_matrix(V, ref.rows, ref.cols)


def player_costs(spec: GameSpec, phi_u, include_terminal: bool = True) -> np.ndarray:
    return np.array([objective_value(spec, p, phi_u, include_terminal) for p in range(spec.n_players)])


def epsilon_gap(spec: GameSpec, phi_u, gamma: float) -> float:
    """``max_p gamma J^p``: the equilibrium gap guaranteed for the soft FIR bound."""
    return float(gamma * np.max(player_costs(spec, phi_u)))


# -----------------------------------------------------------------------------
# Constraint assembly
# -----------------------------------------------------------------------------


class ConstraintAssembly:
    """Constraint blocks for a set of free players, others held fixed.

    Variables are the free players' reduced coordinates followed by auxiliary
    epigraph variables.  Matrices are built once; only offsets depend on the
    fixed players and are refreshed by :meth:`program`.
    """

    def __init__(self, layout: DecisionLayout, compiled: CompiledConstraints, free: list[int],
                 gamma: float, exact_fir: bool):
        self.layout = layout
        self.free = list(free)
        self.gamma = gamma
        self.exact_fir = exact_fir
        own = np.concatenate([np.arange(layout.offsets[p], layout.offsets[p + 1]) for p in self.free])
        other = np.setdiff1d(np.arange(layout.size), own)
        self.own, self.other = own, other
        nv = own.size
        self.n_v = nv

        # robust rows
        self.rows = []
        n_aux = 0
        ineq_blocks, eq_rows, soc_specs = [], [], []
        for row in compiled.active_rows:
            Mc = row.M.tocsc()
            Mo = Mc[:, own].tocsr()
            Mr = Mc[:, other].tocsr()
            live = np.asarray(Mo.getnnz(axis=1) > 0)
            entry = {"row": row, "Mr": Mr, "live": live, "aux": None}
            if row.kind == "l1":
                k = int(live.sum())
                entry["aux"] = np.arange(n_aux, n_aux + k)
                Ml = Mo[live]
                ineq_blocks.append((Ml, entry["aux"]))
                n_aux += k
            else:
                blocks = live.reshape(-1, row.block).any(axis=1)
                entry["live_blocks"] = blocks
                k = int(blocks.sum())
                entry["aux"] = np.arange(n_aux, n_aux + k)
                for b_idx, aux in zip(np.flatnonzero(blocks), entry["aux"]):
                    sl = slice(b_idx * row.block, (b_idx + 1) * row.block)
                    soc_specs.append((Mo[sl], aux, entry, sl))
                n_aux += k
            eq_rows.append(entry["aux"])
            self.rows.append(entry)
        self.n_aux = n_aux
        n = nv + n_aux
        self.n = n

        # inequalities  +-(M v + c) - t <= 0
        F_parts = []
        for Ml, aux in ineq_blocks:
            It = sp.csr_matrix((-np.ones(aux.size), (np.arange(aux.size), aux)), shape=(aux.size, n_aux))
            F_parts.append(sp.hstack([Ml, It]))
            F_parts.append(sp.hstack([-Ml, It]))
        self.F = sp.vstack(F_parts, format="csr") if F_parts else None

        # equalities: epigraph linkage, masked state entries, exact terminal tap
        E_parts = []
        for aux in eq_rows:
            E_parts.append(sp.csr_matrix((np.ones(aux.size), (np.zeros(aux.size, dtype=int), nv + aux)),
                                         shape=(1, n)))
        Lx = layout.joint_state_map
        Lx_own = Lx[:, own].tocsr()
        self.Lx_other = Lx[:, other].tocsr()
        masked = layout.masked_state_rows()
        if masked.size:
            Lm = Lx_own[masked]
            keep = np.asarray(Lm.getnnz(axis=1) > 0)
            self.mask_keep, self.mask_drop = masked[keep], masked[~keep]
            if keep.any():
                E_parts.append(sp.hstack([Lm[keep], sp.csr_matrix((int(keep.sum()), n_aux))]))
        else:
            self.mask_keep = self.mask_drop = np.zeros(0, dtype=int)
        self.terminal = layout.terminal_rows()
        St = sp.hstack([Lx_own[self.terminal], sp.csr_matrix((self.terminal.size, n_aux))], format="csr")
        self.ball_S = None
        if exact_fir:
            E_parts.append(St)
        elif gamma is not None:
            self.ball_S = St
        self.E = sp.vstack(E_parts, format="csr") if E_parts else None

        self.soc_A = []
        for Mb, aux, entry, sl in soc_specs:
            head = sp.csr_matrix(([1.0], ([0], [nv + aux])), shape=(1, n))
            body = sp.hstack([Mb, sp.csr_matrix((Mb.shape[0], n_aux))])
            self.soc_A.append((sp.vstack([head, body], format="csr"), entry, sl))
        self.Q = None

    def set_objective(self, Qv: sp.spmatrix) -> None:
        Qv = sp.csr_matrix(Qv)
        self.Q = sp.block_diag([Qv, sp.csr_matrix((self.n_aux, self.n_aux))], format="csr")

    def program(self, v_joint: np.ndarray, qv: np.ndarray) -> tuple[ConicProgram, str]:
        """Program for the fixed players' part of ``v_joint``; second item names any
        infeasibility detectable before solving (empty string otherwise)."""
        issue = ""
        v_other = v_joint[self.other]
        f_parts, e_parts = [], []
        socs = []
        for entry in self.rows:
            row = entry["row"]
            c = row.c + entry["Mr"] @ v_other
            live = entry["live"]
            if row.kind == "l1":
                cl = c[live]
                f_parts += [-cl, cl]
                budget = row.rhs - float(np.abs(c[~live]).sum())
            else:
                blocks = entry["live_blocks"]
                cb = c.reshape(-1, row.block)
                budget = row.rhs - float(np.linalg.norm(cb[~blocks], axis=1).sum())
                entry["c"] = c
            if budget < -1e-12 * max(1.0, row.rhs):
                issue = f"row {row.label} is violated by the fixed part alone (budget {budget:.3e})"
            e_parts.append([budget])
        for A, entry, sl in self.soc_A:
            b = np.concatenate([[0.0], entry["c"][sl]])
            socs.append(SocBlock(A, b))
        state = self.layout.free_state + self.Lx_other @ v_other
        if self.mask_drop.size and np.max(np.abs(state[self.mask_drop])) > 1e-9:
            issue = "structural mask on the state response cannot be met"
        if self.mask_keep.size and self.E is not None:
            e_parts.append(-state[self.mask_keep])
        s0 = state[self.terminal]
        ball = None
        if self.exact_fir:
            e_parts.append(-s0)
        elif self.ball_S is not None:
            ball = BallConstraint(self.ball_S, float(np.sqrt(self.gamma)), s0)
        q = np.concatenate([qv, np.zeros(self.n_aux)])
        prog = ConicProgram(
            Q=self.Q, q=q,
            E=self.E, e=np.concatenate(e_parts) if self.E is not None else None,
            F=self.F, f=np.concatenate(f_parts) if self.F is not None else None,
            socs=socs, ball=ball, check_symmetry=False,
        )
        return prog, issue


# -----------------------------------------------------------------------------
# Best response
# -----------------------------------------------------------------------------


@dataclass
class ResponseOptions:
    N: int
    gamma: float = 0.95
    exact_fir: bool = False
    structure: StructuralPattern | None = None
    tol: dict | None = None
    max_iters: int = 50000


class BestResponder:
    """Reusable best-response solver of one player (keeps factorizations warm)."""

    def __init__(self, spec: GameSpec, p: int, options: ResponseOptions, hess: HessianBlocks | None = None,
                 layout: DecisionLayout | None = None):
        self.spec, self.p, self.options = spec, p, options
        self.layout = layout or DecisionLayout(spec, options.N, options.structure)
        self.hess = hess or assemble_hessians(spec, options.N)
        compiled = compile_constraints(spec, options.N, player=p, layout=self.layout)
        self.assembly = ConstraintAssembly(self.layout, compiled, [p], options.gamma, options.exact_fir)
        Sel = self.layout.selection(p)
        Hk = sp.kron(sp.identity(spec.state_dim), sp.csr_matrix(self.hess.H[p][p]))
        self.assembly.set_objective(2.0 * (Sel.T @ Hk @ Sel))
        self.cache = SolverCache()
        self.last: SolveResult | None = None

    def linear_term(self, phi_u) -> np.ndarray:
        p, hess = self.p, self.hess
        M = hess.H0[p].copy()
        for q, k in enumerate(phi_u):
            if q != p:
                M += hess.H[p][q] @ _as_matrix(k)
        return 2.0 * M.T.reshape(-1)[self.layout.index[p]]

    def solve(self, phi_u, warm: bool = True) -> tuple[FirKernel, SolveResult]:
        v_joint = self.layout.joint(phi_u)
        prog, issue = self.assembly.program(v_joint, self.linear_term(phi_u))
        if issue:
            raise InfeasibleResponse(issue, self.p)
        opts = self.options
        res = solve(prog, tol=opts.tol, max_iters=opts.max_iters, warm_start=self.last if warm else None,
                    cache=self.cache)
        if res.status == Status.INFEASIBLE:
            raise InfeasibleResponse(res.message or "solver reports infeasibility", self.p, res)
        self.last = res
        return self.layout.expand(self.p, res.x[:self.assembly.n_v]), res


def best_response(p: int, spec: GameSpec, phi_u, N: int | None = None, gamma: float = 0.95,
                  exact_fir: bool = False, structure: StructuralPattern | None = None) -> FirKernel:
    """Best response of player ``p`` to the opponents' kernels in ``phi_u``.

    ``phi_u[p]`` is ignored except for its shape.  Raises
    :class:`InfeasibleResponse` when the program has no feasible point.
    """
    N = phi_u[0].horizon + 1 if N is None else N
    responder = BestResponder(spec, p, ResponseOptions(N, gamma, exact_fir, structure))
    kernel, _ = responder.solve(phi_u, warm=False)
    return kernel

"""Convex quadratic programs with linear, second-order-cone and ball constraints.

The problem is::

    minimize    1/2 x' Q x + q' x
    subject to  E x = e,   F x <= f,
                A_i x + b_i in SOC   (first entry bounds the norm of the rest),
                ||S x + s0||_2 <= radius.

It is solved by an operator-splitting method (ADMM on ``z = K x`` with
``z`` projected onto the product of the constraint sets) using a cached sparse
factorization, Ruiz equilibration and residual-balancing penalty updates.
When the iterate has settled, the active set is read off and the
equality-constrained KKT system is solved directly ("polishing"), which gives
solutions accurate to near machine precision.  An active ball constraint is
polished by a one-dimensional search on its multiplier.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DEFAULT_TOL = {"stationarity": 1e-9, "primal": 1e-9, "dual": 1e-8}


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITERS = "max_iters"


@dataclass
class SocBlock:
    A: sp.csr_matrix
    b: np.ndarray


@dataclass
class BallConstraint:
    S: sp.csr_matrix
    radius: float
    offset: np.ndarray | None = None

    def center_offset(self) -> np.ndarray:
        return np.zeros(self.S.shape[0]) if self.offset is None else self.offset


@dataclass
class ConicProgram:
    """Data of one conic QP; every constraint block is optional."""

    Q: sp.spmatrix
    q: np.ndarray
    E: sp.spmatrix | None = None
    e: np.ndarray | None = None
    F: sp.spmatrix | None = None
    f: np.ndarray | None = None
    socs: list = field(default_factory=list)
    ball: BallConstraint | None = None
    check_symmetry: bool = True

    def __post_init__(self):
        if not sp.isspmatrix_csr(self.Q):
            self.Q = sp.csr_matrix(self.Q)
        n = self.Q.shape[0]
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        if self.Q.shape != (n, n) or self.q.size != n:
            raise ValueError(f"objective dimensions inconsistent: Q {self.Q.shape}, q {self.q.size}")
        if self.check_symmetry and self.Q.nnz:
            asym = abs(self.Q - self.Q.T).max()
            if asym > 1e-12 * max(1.0, abs(self.Q).max()):
                raise ValueError("Q must be symmetric")
        self.E, self.e = self._block(self.E, self.e, "E")
        self.F, self.f = self._block(self.F, self.f, "F")
        for blk in self.socs:
            if not sp.isspmatrix_csr(blk.A):
                blk.A = sp.csr_matrix(blk.A)
            blk.b = np.asarray(blk.b, dtype=float).reshape(-1)
            if blk.A.shape != (blk.b.size, n) or blk.b.size < 2:
                raise ValueError("second-order cone block has inconsistent dimensions")
        if self.ball is not None:
            if not sp.isspmatrix_csr(self.ball.S):
                self.ball.S = sp.csr_matrix(self.ball.S)
            if self.ball.S.shape[1] != n:
                raise ValueError("ball selector has the wrong number of columns")

    def _block(self, M, v, name):
        n = self.Q.shape[0]
        if M is None:
            return sp.csr_matrix((0, n)), np.zeros(0)
        if not sp.isspmatrix_csr(M):
            M = sp.csr_matrix(M)
        v = np.asarray(v, dtype=float).reshape(-1)
        if M.shape != (v.size, n):
            raise ValueError(f"{name} block has shape {M.shape} but {v.size} right-hand sides for {n} variables")
        return M, v

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.Q @ x) + self.q @ x)


@dataclass
class SolveResult:
    """Solution, multipliers and diagnostics.

    Multipliers satisfy ``Q x + q + E'y_eq + F'y_ineq + sum_i A_i'y_soc_i +
    mu S'(S x + s0) = 0`` with ``y_ineq >= 0``, ``-y_soc_i`` in the cone and
    ``mu = ball_multiplier >= 0``.  Residuals are normalized by the magnitude
    of the terms involved.
    """

    x: np.ndarray
    status: Status
    y_eq: np.ndarray
    y_ineq: np.ndarray
    y_soc: list
    ball_multiplier: float
    residuals: dict
    iterations: int
    polished: bool
    objective: float
    active: np.ndarray | None = None
    admm_state: tuple | None = None
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == Status.OPTIMAL


# -----------------------------------------------------------------------------
# Set projections
# -----------------------------------------------------------------------------


def _proj_soc(v: np.ndarray) -> np.ndarray:
    t, x = v[0], v[1:]
    nx = np.linalg.norm(x)
    if nx <= t:
        return v.copy()
    if nx <= -t:
        return np.zeros_like(v)
    a = 0.5 * (t + nx)
    out = np.empty_like(v)
    out[0] = a
    out[1:] = (a / nx) * x
    return out


class _ConstraintSet:
    """Product set ``C`` for the stacked rows ``K x in C``."""

    def __init__(self, prog: ConicProgram):
        self.n_eq = prog.E.shape[0]
        self.n_ineq = prog.F.shape[0]
        self.n_box = self.n_eq + self.n_ineq
        self.lo = np.concatenate([prog.e, np.full(self.n_ineq, -np.inf)])
        self.hi = np.concatenate([prog.e, prog.f])
        self.cones = []  # (slice, shift)
        pos = self.n_box
        for blk in prog.socs:
            k = blk.b.size
            self.cones.append((slice(pos, pos + k), blk.b.copy()))
            pos += k
        self.ball = None  # (slice, center, radius)
        if prog.ball is not None:
            k = prog.ball.S.shape[0]
            self.ball = (slice(pos, pos + k), -prog.ball.center_offset(), float(prog.ball.radius))
            pos += k
        self.m = pos

    def scaled(self, Ed: np.ndarray) -> "_ConstraintSet":
        out = object.__new__(_ConstraintSet)
        out.n_eq, out.n_ineq, out.n_box, out.m = self.n_eq, self.n_ineq, self.n_box, self.m
        out.lo = self.lo * Ed[:self.n_box]
        out.hi = self.hi * Ed[:self.n_box]
        out.cones = [(sl, Ed[sl.start] * b) for sl, b in self.cones]
        out.ball = None
        if self.ball is not None:
            sl, c, r = self.ball
            out.ball = (sl, Ed[sl.start] * c, Ed[sl.start] * r)
        return out

    def project(self, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(v)
        out[:self.n_box] = np.clip(v[:self.n_box], self.lo, self.hi)
        for sl, b in self.cones:
            out[sl] = _proj_soc(v[sl] + b) - b
        if self.ball is not None:
            sl, c, r = self.ball
            d = v[sl] - c
            nd = np.linalg.norm(d)
            out[sl] = v[sl] if nd <= r else c + (r / nd) * d
        return out

    def support(self, d: np.ndarray, tol: float) -> float:
        """Support function ``sup_{z in C} d'z`` (``inf`` if unbounded)."""
        db = d[:self.n_box]
        pos, neg = np.maximum(db, 0.0), np.minimum(db, 0.0)
        if np.any((pos > 0) & np.isinf(self.hi)) or np.any((neg < 0) & np.isinf(self.lo)):
            return np.inf
        val = float(np.sum(np.where(pos > 0, self.hi, 0.0) * pos) + np.sum(np.where(neg < 0, self.lo, 0.0) * neg))
        for sl, b in self.cones:
            # sup over K - b of d'z is -d'b when -d lies in the cone, else infinite
            md = -d[sl]
            if np.linalg.norm(md[1:]) > md[0] + tol:
                return np.inf
            val -= float(d[sl] @ b)
        if self.ball is not None:
            sl, c, r = self.ball
            val += float(d[sl] @ c + r * np.linalg.norm(d[sl]))
        return val

    def block_ids(self) -> np.ndarray:
        """Row-to-block labels used to keep scaling uniform inside cones."""
        ids = np.arange(self.m)
        for sl, _ in self.cones:
            ids[sl] = sl.start
        if self.ball is not None:
            ids[self.ball[0]] = self.ball[0].start
        return ids


def _stack(prog: ConicProgram) -> sp.csr_matrix:
    parts = [prog.E, prog.F] + [blk.A for blk in prog.socs]
    if prog.ball is not None:
        parts.append(prog.ball.S)
    return sp.vstack(parts, format="csr")


# -----------------------------------------------------------------------------
# Cache
# -----------------------------------------------------------------------------


class SolverCache:
    """Factorizations reusable across programs that share their matrices.

    A cache is bound to the matrix objects of the first program it sees and is
    silently reset when a program with different matrices arrives, so reuse is
    always safe.
    """

    def __init__(self, max_polish: int = 6):
        self.key = None
        self.stacked = None
        self.eq_basis = None
        self.scaling = None
        self.admm = {}
        self.polish = OrderedDict()
        self.max_polish = max_polish

    def bind(self, prog: ConicProgram) -> None:
        key = (id(prog.Q), id(prog.E), id(prog.F), tuple(id(b.A) for b in prog.socs),
               None if prog.ball is None else id(prog.ball.S))
        if key != self.key:
            self.key = key
            self._refs = (prog.Q, prog.E, prog.F, [b.A for b in prog.socs], prog.ball)
            self.scaling = None
            self.stacked = None
            self.eq_basis = None
            self.admm = {}
            self.polish = OrderedDict()

    def polish_factor(self, key, build):
        if key in self.polish:
            self.polish.move_to_end(key)
            return self.polish[key]
        val = build()
        self.polish[key] = val
        if len(self.polish) > self.max_polish:
            self.polish.popitem(last=False)
        return val


# -----------------------------------------------------------------------------
# Scaling
# -----------------------------------------------------------------------------


def _factor_quasidefinite(M: sp.spmatrix):
    """LU of a quasi-definite KKT matrix; no pivoting is needed, which keeps fill low."""
    return spla.splu(sp.csc_matrix(M), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                     options={"SymmetricMode": True})


def _col_inf_norms(M: sp.csr_matrix) -> np.ndarray:
    if M.shape[0] == 0 or M.nnz == 0:
        return np.zeros(M.shape[1])
    return np.asarray(abs(M).max(axis=0).todense()).reshape(-1)


def _row_inf_norms(M: sp.csr_matrix) -> np.ndarray:
    if M.shape[1] == 0 or M.nnz == 0:
        return np.zeros(M.shape[0])
    return np.asarray(abs(M).max(axis=1).todense()).reshape(-1)


def _ruiz(Q: sp.csr_matrix, K: sp.csr_matrix, block_ids: np.ndarray, iters: int = 15):
    n, m = Q.shape[0], K.shape[0]
    Dd, Ed = np.ones(n), np.ones(m)
    Qs, Ks = Q.copy(), K.copy()
    for _ in range(iters):
        cn = np.maximum(_col_inf_norms(Qs), _col_inf_norms(Ks))
        rn = _row_inf_norms(Ks)
        dx = np.where(cn > 0, 1.0 / np.sqrt(np.maximum(cn, 1e-300)), 1.0)
        dz = np.where(rn > 0, 1.0 / np.sqrt(np.maximum(rn, 1e-300)), 1.0)
        # cones and the ball need one scale per block to keep their geometry
        if np.any(block_ids != np.arange(m)):
            mins = np.full(m, np.inf)
            np.minimum.at(mins, block_ids, dz)
            dz = mins[block_ids]
        dx = np.clip(dx, 1e-4, 1e4)
        dz = np.clip(dz, 1e-4, 1e4)
        Dx, Dz = sp.diags(dx), sp.diags(dz)
        Qs = (Dx @ Qs @ Dx).tocsr()
        Ks = (Dz @ Ks @ Dx).tocsr()
        Dd *= dx
        Ed *= dz
    qn = _col_inf_norms(Qs)
    mean_q = float(np.mean(qn)) if qn.size else 0.0
    c = 1.0 / mean_q if mean_q > 1e-12 else 1.0
    c = float(np.clip(c, 1e-4, 1e4))
    return Dd, Ed, c, (c * Qs).tocsr(), Ks


# -----------------------------------------------------------------------------
# Residuals and polishing
# -----------------------------------------------------------------------------


def _residuals(prog: ConicProgram, K: sp.csr_matrix, cset: _ConstraintSet, x: np.ndarray,
               y: np.ndarray) -> dict:
    """Normalized KKT residuals of ``(x, y)`` for the original program."""
    Kx = K @ x
    Qx = prog.Q @ x
    Kty = K.T @ y
    stat_scale = max(np.max(np.abs(Qx), initial=0.0), np.max(np.abs(prog.q), initial=0.0),
                     np.max(np.abs(Kty), initial=0.0))
    stat = np.max(np.abs(Qx + prog.q + Kty), initial=0.0) / (1.0 + stat_scale)
    proj = cset.project(Kx)
    bound_scale = max(np.max(np.abs(cset.hi[np.isfinite(cset.hi)]), initial=0.0),
                      np.max(np.abs(Kx), initial=0.0))
    primal = np.max(np.abs(Kx - proj), initial=0.0) / (1.0 + bound_scale)
    y_scale = max(np.max(np.abs(y), initial=0.0), 1.0)
    ni, nb = cset.n_eq, cset.n_box
    yi = y[ni:nb]
    dual = max(0.0, -np.min(yi, initial=0.0))
    slack = cset.hi[ni:nb] - Kx[ni:nb]
    comp = np.max(np.abs(yi * slack), initial=0.0)
    for sl, b in cset.cones:
        # multiplier of z in K - b must lie in -K (normal cone); sign convention y = -lambda
        lam = -y[sl]
        dual = max(dual, max(0.0, np.linalg.norm(lam[1:]) - lam[0]))
        comp = max(comp, abs(float(lam @ (Kx[sl] + b))))
    if cset.ball is not None:
        sl, c, r = cset.ball
        d = Kx[sl] - c
        nd = np.linalg.norm(d)
        yb = y[sl]
        # y_ball must be a nonnegative multiple of d
        mu = float(yb @ d) / max(nd * nd, 1e-300)
        dual = max(dual, np.linalg.norm(yb - mu * d), max(0.0, -mu * nd))
        comp = max(comp, abs(mu) * abs(r * r - nd * nd) * 0.5)
    return {
        "stationarity": float(stat),
        "primal": float(primal),
        "dual": float(dual / y_scale),
        "complementarity": float(comp / (y_scale * (1.0 + bound_scale))),
    }


def _within(res: dict, tol: dict) -> bool:
    return (res["stationarity"] <= tol["stationarity"] and res["primal"] <= tol["primal"]
            and res["dual"] <= tol["dual"] and res["complementarity"] <= tol["dual"])


@dataclass
class _ActiveSet:
    ineq: np.ndarray  # boolean mask over F rows
    ball: bool
    mu: float = 0.0


def _kkt_solve(prog: ConicProgram, act: _ActiveSet, mu: float, x0: np.ndarray, lam0: np.ndarray,
               cache: SolverCache | None):
    """Solve the equality-constrained KKT system for a fixed active set."""
    n = prog.n
    Aact = sp.vstack([prog.E, prog.F[act.ineq]], format="csr")
    bact = np.concatenate([prog.e, prog.f[act.ineq]])
    H = prog.Q
    rhs_x = -prog.q
    if act.ball and mu > 0:
        S = prog.ball.S
        s0 = prog.ball.center_offset()
        H = (H + mu * (S.T @ S)).tocsr()
        rhs_x = rhs_x - mu * (S.T @ s0)
    k = Aact.shape[0]
    diag_scale = max(1.0, float(np.max(np.abs(H.diagonal()), initial=0.0)))
    delta = 1e-9 * diag_scale
    K0 = sp.bmat([[H, Aact.T], [Aact, None]], format="csc") if k else H.tocsc()

    def build():
        if k:
            Kr = sp.bmat([[H + delta * sp.identity(n), Aact.T], [Aact, -delta * sp.identity(k)]], format="csc")
        else:
            Kr = (H + delta * sp.identity(n)).tocsc()
        return _factor_quasidefinite(Kr)

    key = (act.ineq.tobytes(), bool(act.ball), float(mu) if act.ball else 0.0)
    try:
        lu = cache.polish_factor(key, build) if cache is not None else build()
    except RuntimeError:
        return None
    rhs = np.concatenate([rhs_x, bact])
    sol = np.concatenate([x0, lam0])
    rscale = 1.0 + np.max(np.abs(rhs), initial=0.0)
    for _ in range(60):
        r = rhs - K0 @ sol
        if np.max(np.abs(r), initial=0.0) <= 1e-14 * rscale:
            break
        sol = sol + lu.solve(r)
        if not np.all(np.isfinite(sol)):
            return None
    return sol[:n], sol[n:]


def _polish(prog: ConicProgram, K: sp.csr_matrix, cset: _ConstraintSet, act: _ActiveSet, x0: np.ndarray,
            y0: np.ndarray, tol: dict, cache: SolverCache | None, max_rounds: int = 25):
    """Active-set refinement of an approximate solution; ``None`` on failure."""
    if prog.socs:
        Kx = K @ x0
        for sl, b in cset.cones:
            v = Kx[sl] + b
            if np.linalg.norm(v[1:]) >= v[0] - 1e-9 * (1 + abs(v[0])):
                return None  # active cones are not polished
    ne, ni = prog.E.shape[0], prog.F.shape[0]
    act = _ActiveSet(act.ineq.copy(), act.ball, act.mu)
    seen = set()
    for _ in range(max_rounds):
        sig = (act.ineq.tobytes(), act.ball)
        if sig in seen:
            return None
        seen.add(sig)
        lam0 = np.concatenate([y0[:ne], y0[ne:ne + ni][act.ineq]])
        if act.ball:
            out = _solve_with_ball(prog, act, x0, lam0, cache)
        else:
            out = _kkt_solve(prog, act, 0.0, x0, lam0, cache)
            if out is not None:
                out = (out[0], out[1], 0.0)
        if out is None:
            return None
        x, lam, mu = out
        y = np.zeros(cset.m)
        y[:ne] = lam[:ne]
        yi = np.zeros(ni)
        yi[act.ineq] = lam[ne:]
        y[ne:ne + ni] = yi
        if cset.ball is not None:
            sl, c, r = cset.ball
            y[sl] = mu * (prog.ball.S @ x - c)
        Fx = prog.F @ x
        fscale = 1.0 + np.max(np.abs(prog.f), initial=0.0)
        viol = (Fx - prog.f) > tol["primal"] * fscale
        yscale = max(1.0, np.max(np.abs(lam), initial=0.0))
        neg = act.ineq & (yi < -tol["dual"] * yscale)
        ball_bad = False
        if cset.ball is not None:
            sl, c, r = cset.ball
            nd = np.linalg.norm(prog.ball.S @ x - c)
            if not act.ball and nd > r * (1 + tol["primal"]):
                act.ball, act.mu, ball_bad = True, max(act.mu, 1e-6), True
            elif act.ball and mu <= 0.0:
                act.ball, ball_bad = False, True
        if not viol.any() and not neg.any() and not ball_bad:
            res = _residuals(prog, K, cset, x, y)
            if _within(res, tol):
                act.mu = mu
                return x, y, res, act
            return None
        act.ineq = (act.ineq | viol) & ~neg
        x0, y0 = x, y
    return None


def _solve_with_ball(prog: ConicProgram, act: _ActiveSet, x0, lam0, cache):
    """Find the multiplier that puts the solution on the ball's boundary."""
    S, s0, r = prog.ball.S, prog.ball.center_offset(), float(prog.ball.radius)

    def evaluate(mu):
        out = _kkt_solve(prog, act, mu, x0, lam0, None if mu > 0 else cache)
        if out is None:
            return None
        x, lam = out
        return x, lam, np.linalg.norm(S @ x + s0) - r

    base = evaluate(0.0)
    if base is None:
        return None
    if base[2] <= 0.0:
        act.ball = False
        return base[0], base[1], 0.0
    lo, f_lo = 0.0, base[2]
    hi = max(act.mu, 1e-8)
    val = evaluate(hi)
    while val is not None and val[2] > 0:
        lo, f_lo = hi, val[2]
        hi *= 10.0
        if hi > 1e16:
            return None
        val = evaluate(hi)
    if val is None:
        return None
    f_hi = val[2]
    best = val
    # Illinois variant of regula falsi on the residual norm
    side = 0
    for _ in range(200):
        mid = hi - f_hi * (hi - lo) / (f_hi - f_lo) if f_hi != f_lo else 0.5 * (lo + hi)
        if not lo < mid < hi:
            mid = 0.5 * (lo + hi)
        val = evaluate(mid)
        if val is None:
            return None
        best = val
        if abs(val[2]) <= 1e-13 * (1.0 + r) or (hi - lo) <= 1e-15 * hi:
            return val[0], val[1], mid
        if val[2] > 0:
            lo, f_lo = mid, val[2]
            if side == -1:
                f_hi *= 0.5
            side = -1
        else:
            hi, f_hi = mid, val[2]
            if side == 1:
                f_lo *= 0.5
            side = 1
    return best[0], best[1], hi


def _active_from(prog: ConicProgram, cset: _ConstraintSet, x: np.ndarray, y: np.ndarray) -> _ActiveSet:
    ne, ni = prog.E.shape[0], prog.F.shape[0]
    slack = prog.f - prog.F @ x
    yi = y[ne:ne + ni]
    ineq = slack < yi
    ball, mu = False, 0.0
    if cset.ball is not None:
        sl, c, r = cset.ball
        d = prog.ball.S @ x - c
        nd = np.linalg.norm(d)
        mu = float(np.linalg.norm(y[sl])) / max(r, 1e-300)
        ball = (r - nd) < mu * r
    return _ActiveSet(ineq, ball, mu)


def _equalities_consistent(prog: ConicProgram, cache: SolverCache | None = None) -> tuple[bool, float]:
    """Check that ``E x = e`` has a solution at all (range-space test)."""
    E, e = prog.E, prog.e
    if E.shape[0] == 0:
        return True, 0.0
    basis = cache.eq_basis if cache is not None else None
    if basis is None:
        if E.shape[0] * E.shape[1] <= 25_000_000:
            U, s, _ = np.linalg.svd(E.toarray(), full_matrices=False)
            rank = int(np.sum(s > 1e-10 * max(s[0], 1e-300))) if s.size and s[0] > 0 else 0
            basis = U[:, :rank]
        else:
            basis = False
        if cache is not None:
            cache.eq_basis = basis
    if basis is False:
        sol = spla.lsqr(E, e, atol=1e-14, btol=1e-14, iter_lim=20000)[0]
        res = np.linalg.norm(E @ sol - e)
    else:
        res = np.linalg.norm(e - basis @ (basis.T @ e))
    rel = res / (1.0 + np.linalg.norm(e))
    return rel <= 1e-8, float(rel)


# -----------------------------------------------------------------------------
# Main entry points
# -----------------------------------------------------------------------------


def solve(prog: ConicProgram, tol: dict | float | None = None, max_iters: int = 50000,
          warm_start: SolveResult | None = None, cache: SolverCache | None = None,
          rho: float = 0.1, sigma: float = 1e-6, alpha: float = 1.6, polish: bool = True,
          adapt_every: int = 25, infeasible_window: int = 500) -> SolveResult:
    """Solve a :class:`ConicProgram`.

    Parameters
    ----------
    prog : ConicProgram
        Problem data.
    tol : dict or float, optional
        Normalized residual tolerances with keys ``stationarity``, ``primal``
        and ``dual`` (the latter also bounds complementarity).  A float sets
        all three.
    max_iters : int
        Operator-splitting iteration budget.
    warm_start : SolveResult, optional
        Previous solution of a program with the same structure.  Its active
        set is tried first; its primal/dual iterate seeds the splitting method.
    cache : SolverCache, optional
        Keeps factorizations between calls that share matrices.
    """
    if tol is None:
        tol = dict(DEFAULT_TOL)
    elif not isinstance(tol, dict):
        tol = {"stationarity": float(tol), "primal": float(tol), "dual": float(tol)}
    if cache is not None:
        cache.bind(prog)
    n = prog.n
    if cache is not None:
        if cache.stacked is None:
            cache.stacked = _stack(prog)
        K = cache.stacked
    else:
        K = _stack(prog)
    cset = _ConstraintSet(prog)
    m = cset.m

    consistent, eq_res = _equalities_consistent(prog, cache)
    if not consistent:
        return SolveResult(np.zeros(n), Status.INFEASIBLE, np.zeros(prog.E.shape[0]),
                           np.zeros(prog.F.shape[0]), [], 0.0,
                           {"stationarity": np.inf, "primal": eq_res, "dual": np.inf, "complementarity": np.inf},
                           0, False, np.nan, message=f"equality system is inconsistent (residual {eq_res:.2e})")

    def finish(x, y, status, it, polished, res, act=None, state=None, msg=""):
        ne, ni = prog.E.shape[0], prog.F.shape[0]
        y_soc = [y[sl].copy() for sl, _ in cset.cones]
        mu = 0.0
        if cset.ball is not None:
            sl, c, r = cset.ball
            d = prog.ball.S @ x - c
            mu = max(0.0, float(y[sl] @ d) / max(float(d @ d), 1e-300))
        return SolveResult(x, status, y[:ne].copy(), y[ne:ne + ni].copy(), y_soc, mu, res, it, polished,
                           prog.objective(x), active=act, admm_state=state, message=msg)

    # 1. warm active set: often the previous active set is still optimal
    if polish and warm_start is not None and warm_start.active is not None and warm_start.x.size == n:
        ws = warm_start
        y0 = np.zeros(m)
        ne, ni = prog.E.shape[0], prog.F.shape[0]
        if ws.y_eq.size == ne and ws.y_ineq.size == ni:
            y0[:ne], y0[ne:ne + ni] = ws.y_eq, ws.y_ineq
            out = _polish(prog, K, cset, ws.active, ws.x, y0, tol, cache)
            if out is not None:
                x, y, res, act = out
                return finish(x, y, Status.OPTIMAL, 0, True, res, act,
                              state=_warm_state(ws, x, y, K))

    # 2. operator splitting in the equilibrated space
    if cache is not None and cache.scaling is not None:
        Dd, Ed, c, Qs, Ks = cache.scaling
    else:
        Dd, Ed, c, Qs, Ks = _ruiz(prog.Q, K, cset.block_ids())
        if cache is not None:
            cache.scaling = (Dd, Ed, c, Qs, Ks)
    qs = c * Dd * prog.q
    cs = cset.scaled(Ed)

    eq_rows = np.zeros(m, dtype=bool)
    eq_rows[:cset.n_eq] = True

    def rho_vec(r):
        v = np.full(m, r)
        v[eq_rows] = 1e3 * r
        return v

    def factor(r):
        key = round(float(np.log10(r)), 6)
        if cache is not None and key in cache.admm:
            return cache.admm[key]
        rv = rho_vec(r)
        KKT = sp.bmat([[Qs + sigma * sp.identity(n), Ks.T], [Ks, -sp.diags(1.0 / rv)]], format="csc")
        lu = _factor_quasidefinite(KKT)
        if cache is not None:
            if len(cache.admm) > 8:
                cache.admm.pop(next(iter(cache.admm)))
            cache.admm[key] = lu
        return lu

    if warm_start is not None and warm_start.admm_state is not None and warm_start.x.size == n:
        xw, zw, yw, rho_w = warm_start.admm_state
        if zw.size == m:
            xs = xw / Dd
            zs = cs.project(Ed * zw)
            ys = c * yw / Ed
            rho = rho_w
        else:
            xs, zs, ys = np.zeros(n), cs.project(np.zeros(m)), np.zeros(m)
    else:
        xs, zs, ys = np.zeros(n), cs.project(np.zeros(m)), np.zeros(m)

    lu = factor(rho)
    rv = rho_vec(rho)
    admm_tol = {"abs": 1e-7, "rel": 1e-7}
    certificate = 0
    it = 0
    next_polish = 0
    best = None
    check_every = 5
    eps_pinf = 1e-6
    while it < max_iters:
        it += 1
        rhs = np.concatenate([sigma * xs - qs, zs - ys / rv])
        sol = lu.solve(rhs)
        xt, nu = sol[:n], sol[n:]
        zt = zs + (nu - ys) / rv
        x_new = alpha * xt + (1 - alpha) * xs
        zr = alpha * zt + (1 - alpha) * zs
        z_new = cs.project(zr + ys / rv)
        y_new = ys + rv * (zr - z_new)
        dy = y_new - ys
        xs, zs, ys = x_new, z_new, y_new
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            break
        if it % check_every:
            continue
        # unscaled quantities
        x = Dd * xs
        z = zs / Ed
        y = Ed * ys / c
        Kx = K @ x
        Qx = prog.Q @ x
        Kty = K.T @ y
        r_prim = np.max(np.abs(Kx - z), initial=0.0)
        r_dual = np.max(np.abs(Qx + prog.q + Kty), initial=0.0)
        p_scale = max(np.max(np.abs(Kx), initial=0.0), np.max(np.abs(z), initial=0.0))
        d_scale = max(np.max(np.abs(Qx), initial=0.0), np.max(np.abs(Kty), initial=0.0),
                      np.max(np.abs(prog.q), initial=0.0))
        eps_p = admm_tol["abs"] + admm_tol["rel"] * p_scale
        eps_d = admm_tol["abs"] + admm_tol["rel"] * d_scale
        # infeasibility certificate on the dual displacement
        dyu = Ed * dy
        ndy = np.max(np.abs(dyu), initial=0.0)
        if ndy > 1e-12 and np.max(np.abs(K.T @ dyu), initial=0.0) <= eps_pinf * ndy \
                and cset.support(dyu, eps_pinf * ndy) < -eps_pinf * ndy:
            certificate += check_every
            if certificate >= infeasible_window:
                res = _residuals(prog, K, cset, x, y)
                return finish(x, y, Status.INFEASIBLE, it, False, res,
                              msg="dual iterates diverge along a separating direction")
        else:
            certificate = 0
        settled = r_prim <= eps_p and r_dual <= eps_d
        if polish and (settled or (it >= next_polish and r_prim <= 1e3 * eps_p and r_dual <= 1e3 * eps_d)):
            act = _active_from(prog, cset, x, y)
            out = _polish(prog, K, cset, act, x, y, tol, cache)
            next_polish = it + 200
            if out is not None:
                xp, yp, res, act = out
                return finish(xp, yp, Status.OPTIMAL, it, True, res, act,
                              state=(xp, K @ xp, yp, rho))
        if settled:
            res = _residuals(prog, K, cset, x, y)
            if _within(res, tol):
                return finish(x, y, Status.OPTIMAL, it, False, res, _active_from(prog, cset, x, y),
                              state=(x, z, y, rho))
            best = (x, y)
            admm_tol = {"abs": admm_tol["abs"] * 0.1, "rel": admm_tol["rel"] * 0.1}
            if admm_tol["abs"] < 1e-15:
                break
        if it % adapt_every == 0:
            # residual balancing in the scaled space
            Kxs = Ks @ xs
            pr = np.max(np.abs(Kxs - zs), initial=0.0) / max(np.max(np.abs(Kxs), initial=0.0),
                                                             np.max(np.abs(zs), initial=0.0), 1e-30)
            Ktys = Ks.T @ ys
            dr = np.max(np.abs(Qs @ xs + qs + Ktys), initial=0.0) / max(
                np.max(np.abs(Qs @ xs), initial=0.0), np.max(np.abs(Ktys), initial=0.0),
                np.max(np.abs(qs), initial=0.0), 1e-30)
            if pr > 0 and dr > 0:
                new_rho = float(np.clip(rho * np.sqrt(pr / dr), 1e-6, 1e6))
                if new_rho > 5 * rho or new_rho < rho / 5:
                    rho = new_rho
                    lu = factor(rho)
                    rv = rho_vec(rho)
    x = Dd * xs
    y = Ed * ys / c
    if best is not None:
        x, y = best
    res = _residuals(prog, K, cset, x, y)
    status = Status.OPTIMAL if _within(res, tol) else Status.MAX_ITERS
    return finish(x, y, status, it, False, res, _active_from(prog, cset, x, y), state=(x, K @ x, y, rho))


def _warm_state(ws: SolveResult, x, y, K):
    rho = ws.admm_state[3] if ws.admm_state is not None else 0.1
    return (x, K @ x, y, rho)


def project_feasible(prog: ConicProgram, reference: np.ndarray, weights: np.ndarray | None = None,
                     **kwargs) -> SolveResult:
    """Closest point to ``reference`` (weighted squared distance) in the feasible set.

    ``weights`` selects which coordinates are measured (default: all), so
    auxiliary epigraph variables can be left free.
    """
    n = prog.n
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    ref = np.asarray(reference, dtype=float)
    proj = ConicProgram(Q=sp.diags(2.0 * w, format="csr"), q=-2.0 * w * ref, E=prog.E, e=prog.e, F=prog.F,
                        f=prog.f, socs=prog.socs, ball=prog.ball)
    return solve(proj, **kwargs)

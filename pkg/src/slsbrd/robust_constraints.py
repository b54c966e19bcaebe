"""Noise-robust reformulation of polyhedral state and input constraints.

A constraint ``g' x_t <= h`` that must hold for every disturbance sequence in
``W`` becomes ``sum_n ||(g' Phi_n R)'||_* <= h`` where ``R`` is the right factor of
the noise model (``P^+`` or ``P^{-1}``) and ``||.||_*`` the dual norm (1-norm for
the infinity ball, 2-norm for the ellipsoid).  Each row is compiled into an
affine map from the joint decision vector to the stacked values
``a_{n,k} = (g' Phi_n R)_k`` so that the QP builder can attach epigraph
variables or second-order cones.

Every tap takes its own worst case, so the bound is conservative whenever the
noise set couples stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .game_model import GameSpec, ModelError, NoiseModel, StructuralPattern
from .layout import DecisionLayout
from .sls_core import FirKernel


def worst_case_lhs(row, taps, noise: NoiseModel) -> float:
    """Supremum of ``row' (Phi * w)_t`` over noise sequences in ``W``.

    Parameters
    ----------
    row : array_like
        Constraint functional of length ``rows``.
    taps : FirKernel or ndarray
        Kernel taps of shape ``(H, rows, N_x)``.
    noise : NoiseModel
        Bounded disturbance set.
    """
    taps = taps.taps if isinstance(taps, FirKernel) else np.asarray(taps, dtype=float)
    g = np.asarray(row, dtype=float).reshape(-1)
    if taps.shape[1] != g.size or taps.shape[2] != noise.P.shape[1]:
        raise ModelError(f"row of length {g.size} does not match taps {taps.shape}", "row")
    if noise.kind == "ellipsoid" and abs(np.linalg.det(noise.P)) < 1e-300:
        raise ModelError("ellipsoid shape matrix is singular", "noise.P")
    a = np.einsum("r,nrj,jk->nk", g, taps, noise.right_factor())
    if noise.kind == "inf_ball":
        return float(np.abs(a).sum())
    return float(np.linalg.norm(a, axis=1).sum())


def tap_functional(g: np.ndarray, R: np.ndarray, horizon: int) -> sp.csr_matrix:
    """Sparse map ``vec(Phi) -> (g' Phi_n R)_{n,k}`` for the column-major tap layout."""
    nr, nc, nw = g.size, R.shape[0], R.shape[1]
    n, k, j, r = np.meshgrid(np.arange(horizon), np.arange(nw), np.arange(nc), np.arange(nr), indexing="ij")
    vals = g[r] * R[j, k]
    keep = vals != 0.0
    rows = (n * nw + k)[keep]
    cols = (j * horizon * nr + n * nr + r)[keep]
    return sp.csr_matrix((vals[keep], (rows, cols)), shape=(horizon * nw, nc * horizon * nr))


@dataclass
class CompiledRow:
    """One robust constraint ``sum_n ||a_n(v)||_* <= rhs`` with ``a(v) = M v + c``.

    ``a`` stacks the per-tap vectors ``a_n`` of length ``block``.  Rows that
    repeat an earlier row up to sign are marked with ``alias_of`` and skipped by
    the QP builder.
    """

    origin: str
    player: int | None
    index: int
    kind: str
    M: sp.csr_matrix
    c: np.ndarray
    block: int
    rhs: float
    alias_of: int | None = None

    @property
    def label(self) -> str:
        who = "" if self.player is None else f"[{self.player}]"
        return f"{self.origin}{who}:{self.index}"

    def values(self, v: np.ndarray) -> np.ndarray:
        return (self.M @ v + self.c).reshape(-1, self.block)

    def lhs(self, v: np.ndarray) -> float:
        a = self.values(v)
        if self.kind == "l1":
            return float(np.abs(a).sum())
        return float(np.linalg.norm(a, axis=1).sum())


@dataclass
class CompiledConstraints:
    """Robust rows over the joint decision vector of a :class:`DecisionLayout`."""

    layout: DecisionLayout
    rows: list = field(default_factory=list)
    player: int | None = None

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def active_rows(self) -> list[CompiledRow]:
        return [r for r in self.rows if r.alias_of is None]

    def lhs(self, v: np.ndarray) -> np.ndarray:
        return np.array([r.lhs(v) for r in self.rows])

    def rhs(self) -> np.ndarray:
        return np.array([r.rhs for r in self.rows])


@dataclass
class SlackReport:
    labels: list
    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def slack(self) -> np.ndarray:
        return self.lhs - self.rhs

    def feasible(self, tol: float = 1e-9) -> bool:
        return bool(np.all(self.slack <= tol * (1.0 + np.abs(self.rhs))))

    def max_slack(self) -> float:
        return float(np.max(self.slack)) if self.slack.size else -np.inf


def _same_up_to_sign(a: CompiledRow, b: CompiledRow) -> bool:
    if a.kind != b.kind or a.rhs != b.rhs or a.M.shape != b.M.shape:
        return False
    for s in (1.0, -1.0):
        if abs(a.M - s * b.M).max() == 0.0 and np.array_equal(a.c, s * b.c):
            return True
    return False


def compile_constraints(spec: GameSpec, N: int, player: int | None = None,
                        structure: StructuralPattern | None = None,
                        layout: DecisionLayout | None = None) -> CompiledConstraints:
    """Compile the constraint rows relevant to ``player`` (all players if ``None``).

    State rows act on ``Phi_x`` (taps 1..N), input rows on the player's own
    ``Phi_u`` (taps 1..N-1) and coupled rows on ``sum_q G_G^q Phi_u^q``.  All
    rows are expressed over the joint decision vector; opponents' coordinates
    are turned into constants when a best response is assembled.
    """
    layout = layout or DecisionLayout(spec, N, structure if structure is not None else spec.structure)
    out = CompiledConstraints(layout=layout, player=player)
    n_rows = spec.G_x.shape[0] + spec.g_G.size + sum(
        G.shape[0] for p, G in enumerate(spec.G_u) if player is None or p == player)
    if n_rows == 0:
        return out
    if spec.noise is None:
        raise ModelError("bounded constraints cannot be enforced against unbounded noise", "noise")
    kind = "l1" if spec.noise.kind == "inf_ball" else "l2"
    R = spec.noise.right_factor()
    nw = R.shape[1]
    players = range(spec.n_players) if player is None else [player]

    for i, (g, h) in enumerate(zip(spec.G_x, spec.g_x)):
        T = tap_functional(g, R, N)
        out.rows.append(CompiledRow("X", None, i, kind, (T @ layout.joint_state_map).tocsr(),
                                    T @ layout.free_state, nw, float(h)))
    for p in players:
        for j, (g, h) in enumerate(zip(spec.G_u[p], spec.g_u[p])):
            T = tap_functional(g, R, N - 1) @ layout.selection(p)
            blocks = [T if q == p else sp.csr_matrix((T.shape[0], layout.sizes[q]))
                      for q in range(spec.n_players)]
            out.rows.append(CompiledRow("U", p, j, kind, sp.hstack(blocks, format="csr"),
                                        np.zeros(T.shape[0]), nw, float(h)))
    for l in range(spec.g_G.size):
        blocks = [tap_functional(spec.G_G[q][l], R, N - 1) @ layout.selection(q) for q in range(spec.n_players)]
        M = sp.hstack(blocks, format="csr")
        out.rows.append(CompiledRow("G", None, l, kind, M, np.zeros(M.shape[0]), nw, float(spec.g_G[l])))

    for i, row in enumerate(out.rows):
        for j in range(i):
            if out.rows[j].alias_of is None and _same_up_to_sign(row, out.rows[j]):
                row.alias_of = j
                break
    return out


def check_feasible_point(compiled: CompiledConstraints, phi_u) -> SlackReport:
    """Worst-case left-hand side minus right-hand side for every compiled row."""
    v = compiled.layout.joint(phi_u)
    return SlackReport([r.label for r in compiled.rows], compiled.lhs(v), compiled.rhs())


def dump_text(compiled: CompiledConstraints, phi_u=None) -> str:
    """Human-readable listing of compiled rows (optionally with slacks)."""
    lines = [f"compiled rows: {len(compiled.rows)}  decision size: {compiled.layout.size}"]
    rep = check_feasible_point(compiled, phi_u) if phi_u is not None else None
    for i, r in enumerate(compiled.rows):
        line = (f"{r.label:>10s} kind={r.kind} rhs={r.rhs:.6g} taps={r.M.shape[0] // r.block} "
                f"nnz={r.M.nnz}")
        if r.alias_of is not None:
            line += f" alias_of={compiled.rows[r.alias_of].label}"
        if rep is not None:
            line += f" lhs={rep.lhs[i]:.6g} slack={rep.slack[i]:.3e}"
        lines.append(line)
    return "\n".join(lines)

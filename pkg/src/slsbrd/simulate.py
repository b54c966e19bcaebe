"""Closed-loop simulation of learned policies.

The plant is ``x_{t+1} = A x_t + sum_p B^p u^p_t + w_t`` and every player runs
its own internal-state controller built from a pair of system responses.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .game_model import GameSpec, ModelError, NoiseModel
from .sls_core import ControllerState, FirKernel, PolicyKernel, controller_step

BLOWUP = 1e12


# -----------------------------------------------------------------------------
# Noise sources
# -----------------------------------------------------------------------------


class NoiseSource:
    """Produces the disturbance sequence ``w_0 .. w_{T-1}``."""

    def sequence(self, T: int, dim: int) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


class Zero(NoiseSource):
    def sequence(self, T, dim):
        return np.zeros((T, dim))


@dataclass
class Impulse(NoiseSource):
    """Unit vector ``e_j`` (scaled by ``amplitude``) at stage ``t0``, zero elsewhere."""

    j: int
    t0: int = 0
    amplitude: float = 1.0

    def sequence(self, T, dim):
        if not 0 <= self.j < dim:
            raise ModelError(f"impulse direction {self.j} outside dimension {dim}", "noise")
        w = np.zeros((T, dim))
        if 0 <= self.t0 < T:
            w[self.t0, self.j] = self.amplitude
        return w

    def describe(self):
        return {"kind": "Impulse", "j": self.j, "t0": self.t0, "amplitude": self.amplitude}


@dataclass
class UniformBall(NoiseSource):
    """Independent samples distributed uniformly over the noise set.

    For the infinity ball ``{w : ||P w||_inf <= 1}`` a uniform point of the
    unit cube is mapped through ``P^+``.  For the ellipsoid
    ``{w : ||P w||_2 <= 1}`` a uniform point of the unit Euclidean ball is used.
    """

    noise: NoiseModel
    seed: int = 0

    def sequence(self, T, dim):
        rng = np.random.default_rng(self.seed)
        R = self.noise.right_factor()
        k = R.shape[1]
        if self.noise.kind == "inf_ball":
            z = rng.uniform(-1.0, 1.0, size=(T, k))
        else:
            g = rng.standard_normal((T, k))
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            z = g * rng.uniform(size=(T, 1)) ** (1.0 / k)
        w = z @ R.T
        if w.shape[1] != dim:
            raise ModelError(f"noise dimension {w.shape[1]} does not match state dimension {dim}", "noise")
        return w

    def describe(self):
        return {"kind": "UniformBall", "noise": self.noise.kind, "seed": self.seed}


@dataclass
class Scripted(NoiseSource):
    """Explicit table: ``blocks`` is a list of ``(first, last, value)`` with inclusive stages."""

    blocks: list = field(default_factory=list)
    scale: np.ndarray | float = 1.0

    def sequence(self, T, dim):
        w = np.zeros((T, dim))
        for first, last, value in self.blocks:
            lo, hi = max(0, int(first)), min(T - 1, int(last))
            if lo <= hi:
                w[lo:hi + 1] = np.asarray(value, dtype=float)
        if np.ndim(self.scale) == 2:
            return w @ np.asarray(self.scale).T
        return w * self.scale

    def value(self, t: int, dim: int) -> np.ndarray:
        return self.sequence(t + 1, dim)[t]

    def describe(self):
        return {"kind": "Scripted", "blocks": [[a, b, list(map(float, v))] for a, b, v in self.blocks]}


@dataclass
class Gaussian(NoiseSource):
    """Independent ``N(0, scale^2 I)`` samples on the first ``stages`` stages (all if ``None``)."""

    seed: int = 0
    scale: float = 1.0
    stages: int | None = None

    def sequence(self, T, dim):
        rng = np.random.default_rng(self.seed)
        w = self.scale * rng.standard_normal((T, dim))
        if self.stages is not None:
            w[self.stages:] = 0.0
        return w

    def describe(self):
        return {"kind": "Gaussian", "seed": self.seed, "scale": self.scale, "stages": self.stages}


MARKET_SCRIPT = [
    (265, 279, (1, 1, 1, 1)),
    (293, 307, (1, -1, 1, -1)),
    (321, 335, (-1, 1, -1, 1)),
    (349, 363, (1, 1, -1, -1)),
    (377, 391, (-1, -1, -1, -1)),
]


def market_disturbance_script() -> Scripted:
    """Five blocks of extreme demand fluctuations, zero outside them."""
    return Scripted(list(MARKET_SCRIPT))


# -----------------------------------------------------------------------------
# Trajectories
# -----------------------------------------------------------------------------


@dataclass
class Trajectory:
    """States ``x_0 .. x_T``, actions and disturbances ``0 .. T-1``, stage costs per player."""

    x: np.ndarray
    u: list
    w: np.ndarray
    costs: np.ndarray
    unstable: bool = False
    seed: int | None = None

    @property
    def T(self) -> int:
        return self.w.shape[0]

    def dynamics_residual(self, spec: GameSpec) -> float:
        r = self.x[1:] - self.x[:-1] @ spec.A.T - self.w
        for B, u in zip(spec.B, self.u):
            r -= u @ B.T
        return float(np.max(np.abs(r))) if r.size else 0.0

    def to_csv(self, path, start: int = 0, header: dict | None = None) -> None:
        """Rows ``t, x_1.., u^1_1.., ...`` for stages ``t >= start``; header lines start with ``#``."""
        nx = self.x.shape[1]
        cols = ["t"] + [f"x_{i + 1}" for i in range(nx)]
        for p, u in enumerate(self.u):
            cols += [f"u{p + 1}_{i + 1}" for i in range(u.shape[1])]
        with open(path, "w", newline="") as fh:
            if header:
                for key, val in header.items():
                    fh.write(f"# {key}: {val}\n")
            writer = csv.writer(fh)
            writer.writerow(cols)
            for t in range(start, self.T):
                row = [t] + list(self.x[t])
                for u in self.u:
                    row += list(u[t])
                writer.writerow([repr(float(v)) if i else v for i, v in enumerate(row)])


def _stage_costs(spec: GameSpec, x: np.ndarray, u: list) -> np.ndarray:
    T = len(u[0])
    costs = np.zeros((T, spec.n_players))
    for p in range(spec.n_players):
        cx = x[:T] @ spec.C[p].T
        du = sum(u[q] @ spec.D[p][q].T for q in range(spec.n_players))
        costs[:, p] = np.sum(cx ** 2, axis=1) + np.sum(du ** 2, axis=1)
    return costs


def closed_loop_run(spec: GameSpec, policies, T: int, noise: NoiseSource | None = None,
                    x0: np.ndarray | None = None) -> Trajectory:
    """Simulate ``T`` stages with every player running its internal-state controller.

    Parameters
    ----------
    policies : sequence of PolicyKernel or None
        One per player.  ``None`` means the zero action (open loop).
    noise : NoiseSource
        Zero noise by default.

    Stops early and flags ``unstable`` when the state leaves ``1e12`` or
    becomes non-finite; the remaining stages are filled with NaN.
    """
    nx = spec.state_dim
    noise = noise or Zero()
    w = noise.sequence(T, nx)
    x = np.full((T + 1, nx), np.nan)
    x[0] = np.zeros(nx) if x0 is None else np.asarray(x0, dtype=float)
    u = [np.full((T, nu), np.nan) for nu in spec.input_dims]
    states = [None if pol is None else ControllerState(pol.phi_x, pol.phi_u) for pol in policies]
    unstable = False
    for t in range(T):
        nxt = spec.A @ x[t] + w[t]
        for p, st in enumerate(states):
            up = np.zeros(spec.input_dims[p]) if st is None else controller_step(st, x[t])
            u[p][t] = up
            nxt += spec.B[p] @ up
        if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > BLOWUP:
            unstable = True
            break
        x[t + 1] = nxt
    costs = _stage_costs(spec, np.nan_to_num(x), [np.nan_to_num(a) for a in u])
    seed = getattr(noise, "seed", None)
    return Trajectory(x, u, w, costs, unstable, seed)


def monte_carlo_cost(spec: GameSpec, policies, T: int | None = None, n_runs: int = 1000, seed: int = 0,
                     scale: float = 1.0, stationary: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error of the truncated closed-loop cost of every player.

    By default every run starts from rest, receives one disturbance
    ``w_0 ~ N(0, scale^2 I)`` and then evolves noise-free for ``T`` stages, so
    the expected cost summed over stages equals the Frobenius objective
    (times ``scale^2``) up to truncation.  With ``stationary=True`` the noise
    is independent at every stage and the per-stage average cost is returned.
    ``T`` defaults to ``20 N``.
    """
    if T is None:
        N = max(pol.phi_x.horizon for pol in policies if pol is not None)
        T = 20 * N
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63 - 1, size=n_runs)
    samples = np.zeros((n_runs, spec.n_players))
    for i, s in enumerate(seeds):
        noise = Gaussian(int(s), scale, None if stationary else 1)
        traj = closed_loop_run(spec, policies, T, noise)
        total = traj.costs.sum(axis=0)
        samples[i] = total / T if stationary else total
    mean = samples.mean(axis=0)
    stderr = samples.std(axis=0, ddof=1) / np.sqrt(n_runs) if n_runs > 1 else np.full(spec.n_players, np.inf)
    return mean, stderr


def closed_loop_spectral_radius(spec: GameSpec, policies, L: int | None = None) -> float:
    """Spectral radius of the lifted closed loop under truncated policy kernels.

    With ``u^p_t = sum_{tau < L} K^p_{tau+1} x_{t-tau}`` the stacked state
    ``(x_t, .., x_{t-L+1})`` evolves through a block companion matrix.
    ``policies`` holds PolicyKernel objects (their ``taps``), FirKernel
    objects, or ``None`` for the zero policy.
    """
    nx = spec.state_dim
    kernels = []
    for pol in policies:
        if pol is None:
            continue
        k = pol.taps if isinstance(pol, PolicyKernel) else pol
        kernels.append(k)
    if L is None:
        L = max([k.horizon for k in kernels], default=1)
    L = max(L, 1)
    top = np.zeros((nx, L * nx))
    top[:, :nx] = spec.A
    p_active = [p for p, pol in enumerate(policies) if pol is not None]
    for p, k in zip(p_active, kernels):
        for tau in range(min(L, k.horizon)):
            top[:, tau * nx:(tau + 1) * nx] += spec.B[p] @ k.taps[tau]
    if L == 1:
        return float(np.max(np.abs(np.linalg.eigvals(top))))
    shift = sp.eye((L - 1) * nx, L * nx, format="csr")
    M = sp.vstack([sp.csr_matrix(top), shift], format="csr")
    if M.shape[0] <= 1500:
        return float(np.max(np.abs(np.linalg.eigvals(M.toarray()))))
    vals = spla.eigs(M, k=6, which="LM", return_eigenvectors=False, tol=1e-10, maxiter=20000)
    return float(np.max(np.abs(vals)))


def constraint_violations(spec: GameSpec, traj: Trajectory, tol: float = 1e-9) -> dict:
    """Number of stages at which each constraint family is violated, plus the worst excess."""
    T = traj.T
    out = {}
    if spec.G_x.shape[0]:
        lhs = traj.x[1:T + 1] @ spec.G_x.T - spec.g_x
        out["X"] = (int(np.sum(np.any(lhs > tol, axis=1))), float(np.max(lhs)))
    for p, (G, g) in enumerate(zip(spec.G_u, spec.g_u)):
        if G.shape[0]:
            lhs = traj.u[p] @ G.T - g
            out[f"U{p}"] = (int(np.sum(np.any(lhs > tol, axis=1))), float(np.max(lhs)))
    if spec.g_G.size:
        lhs = sum(u @ G.T for u, G in zip(traj.u, spec.G_G)) - spec.g_G
        out["G"] = (int(np.sum(np.any(lhs > tol, axis=1))), float(np.max(lhs)))
    return out

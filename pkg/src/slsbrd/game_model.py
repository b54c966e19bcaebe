"""Linear-quadratic stochastic game instances.

A game is described by the dynamics ``x_{t+1} = A x_t + sum_p B^p u^p_t + w_t``,
per-player stage costs ``||C^p x_t||^2 + ||sum_q D^{pq} u^q_t||^2``, polyhedral
state / input / coupled constraints and a bounded noise set ``W``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

STRUCTURAL_ZERO_TOL = 1e-12
RANK_TOL = 1e-9


class ModelError(ValueError):
    """Raised when a game description is inconsistent.

    The ``matrix`` attribute names the offending matrix (for example ``"B[1]"``).
    """

    def __init__(self, message: str, matrix: str | None = None):
        super().__init__(message if matrix is None else f"{matrix}: {message}")
        self.matrix = matrix


def _as_matrix(value, name: str, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 1 and cols == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ModelError(f"expected a 2-D matrix, got shape {arr.shape}", name)
    if rows is not None and arr.shape[0] != rows:
        raise ModelError(f"expected {rows} rows, got {arr.shape[0]}", name)
    if cols is not None and arr.shape[1] != cols:
        raise ModelError(f"expected {cols} columns, got {arr.shape[1]}", name)
    if not np.all(np.isfinite(arr)):
        raise ModelError("contains non-finite entries", name)
    return arr


def _as_vector(value, name: str, length: int | None = None) -> np.ndarray:
    arr = np.array(value, dtype=float).reshape(-1)
    if length is not None and arr.size != length:
        raise ModelError(f"expected length {length}, got {arr.size}", name)
    if not np.all(np.isfinite(arr)):
        raise ModelError("contains non-finite entries", name)
    return arr


@dataclass(frozen=True)
class NoiseModel:
    """Bounded disturbance set.

    ``kind == "inf_ball"`` describes ``{w : ||P w||_inf <= 1}`` with ``P`` of full
    column rank; ``kind == "ellipsoid"`` describes ``{w : ||P w||_2 <= 1}`` with
    ``P`` symmetric positive definite.
    """

    kind: str
    P: np.ndarray

    def __post_init__(self):
        if self.kind not in ("inf_ball", "ellipsoid"):
            raise ModelError(f"unknown noise kind {self.kind!r}", "noise")
        P = _as_matrix(self.P, "noise.P")
        object.__setattr__(self, "P", P)
        s = np.linalg.svd(P, compute_uv=False)
        if self.kind == "inf_ball":
            if P.shape[0] < P.shape[1] or s.size == 0 or s[-1] <= RANK_TOL * s[0]:
                raise ModelError("must have full column rank", "noise.P")
        else:
            if P.shape[0] != P.shape[1] or not np.allclose(P, P.T, atol=1e-12):
                raise ModelError("must be symmetric", "noise.P")
            if np.linalg.eigvalsh(P)[0] <= 0:
                raise ModelError("must be positive definite", "noise.P")

    @classmethod
    def infinity_ball(cls, P) -> "NoiseModel":
        return cls("inf_ball", np.asarray(P, dtype=float))

    @classmethod
    def energy_ellipsoid(cls, P) -> "NoiseModel":
        return cls("ellipsoid", np.asarray(P, dtype=float))

    @property
    def dim(self) -> int:
        return self.P.shape[1]

    def right_factor(self) -> np.ndarray:
        """Matrix ``R`` such that the worst case of ``g Phi w`` is a dual norm of ``g Phi R``.

        This is ``P^+`` (SVD pseudo-inverse, cutoff ``1e-10 sigma_max``) for the
        infinity ball and ``P^{-1}`` for the ellipsoid.
        """
        if self.kind == "ellipsoid":
            return np.linalg.inv(self.P)
        return np.linalg.pinv(self.P, rcond=1e-10)

    def dual_order(self) -> float:
        return 1.0 if self.kind == "inf_ball" else 2.0


@dataclass(frozen=True)
class StructuralPattern:
    """Binary masks on kernel taps encoding an information pattern.

    ``S_x[n-1]`` is the mask of state-response tap ``n`` (n = 1..N) and
    ``S_u[p][n-1]`` the mask of player ``p``'s input-response tap ``n``.
    """

    d_a: int
    d_s: int
    S_x: np.ndarray
    S_u: tuple

    @property
    def horizon(self) -> int:
        return self.S_x.shape[0]


@dataclass
class GameSpec:
    """Matrices, constraints and noise model of one LQ dynamic game.

    Constraint blocks may have zero rows, meaning "unconstrained".  ``D[p][q]`` is
    the penalty of player ``q``'s input inside player ``p``'s cost.
    """

    A: np.ndarray
    B: list
    C: list
    D: list
    G_x: np.ndarray | None = None
    g_x: np.ndarray | None = None
    G_u: list | None = None
    g_u: list | None = None
    G_G: list | None = None
    g_G: np.ndarray | None = None
    noise: NoiseModel | None = None
    structure: StructuralPattern | None = None
    noise_covariance: np.ndarray | None = None
    name: str = "game"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        nx = A.shape[0]
        if A.shape[1] != nx:
            raise ModelError(f"must be square, got shape {A.shape}", "A")
        self.A = A
        if len(self.B) == 0:
            raise ModelError("at least one player is required", "B")
        npl = len(self.B)
        self.B = [_as_matrix(b, f"B[{p}]", rows=nx) for p, b in enumerate(self.B)]
        nus = [b.shape[1] for b in self.B]
        if len(self.C) != npl:
            raise ModelError(f"expected {npl} matrices, got {len(self.C)}", "C")
        self.C = [_as_matrix(c, f"C[{p}]", cols=nx) for p, c in enumerate(self.C)]
        nz = self.C[0].shape[0]
        for p, c in enumerate(self.C):
            if c.shape[0] != nz:
                raise ModelError(f"expected {nz} rows like C[0], got {c.shape[0]}", f"C[{p}]")
        if len(self.D) != npl or any(len(row) != npl for row in self.D):
            raise ModelError(f"expected a {npl}x{npl} table", "D")
        self.D = [
            [_as_matrix(self.D[p][q], f"D[{p}][{q}]", rows=nz, cols=nus[q]) for q in range(npl)]
            for p in range(npl)
        ]

        if self.G_x is None or np.size(self.G_x) == 0:
            self.G_x = np.zeros((0, nx))
            self.g_x = np.zeros(0)
        else:
            self.G_x = _as_matrix(self.G_x, "G_x", cols=nx)
            self.g_x = _as_vector(self.g_x, "g_x", self.G_x.shape[0])
        G_u = self.G_u if self.G_u is not None else [None] * npl
        g_u = self.g_u if self.g_u is not None else [None] * npl
        if len(G_u) != npl or len(g_u) != npl:
            raise ModelError(f"expected {npl} blocks", "G_u")
        self.G_u, self.g_u = [], []
        for p in range(npl):
            if G_u[p] is None or np.size(G_u[p]) == 0:
                self.G_u.append(np.zeros((0, nus[p])))
                self.g_u.append(np.zeros(0))
            else:
                G = _as_matrix(G_u[p], f"G_u[{p}]", cols=nus[p])
                self.G_u.append(G)
                self.g_u.append(_as_vector(g_u[p], f"g_u[{p}]", G.shape[0]))
        if self.G_G is None or all(np.size(G) == 0 for G in self.G_G):
            self.G_G = [np.zeros((0, nu)) for nu in nus]
            self.g_G = np.zeros(0)
        else:
            if len(self.G_G) != npl:
                raise ModelError(f"expected {npl} blocks", "G_G")
            self.g_G = _as_vector(self.g_G, "g_G")
            self.G_G = [
                _as_matrix(G, f"G_G[{p}]", rows=self.g_G.size, cols=nus[p]) for p, G in enumerate(self.G_G)
            ]
        for name, g in [("g_x", self.g_x), ("g_G", self.g_G)] + [
            (f"g_u[{p}]", g) for p, g in enumerate(self.g_u)
        ]:
            if np.any(g < 0):
                raise ModelError("right-hand sides must be nonnegative", name)
        if self.noise is not None and self.noise.dim != nx:
            raise ModelError(f"acts on dimension {self.noise.dim}, state has {nx}", "noise.P")
        if self.noise_covariance is not None:
            self.noise_covariance = _as_matrix(self.noise_covariance, "noise_covariance", nx, nx)
        if self.structure is not None:
            if self.structure.S_x.shape[1:] != (nx, nx) or len(self.structure.S_u) != npl:
                raise ModelError("mask dimensions do not match the game", "structure")

    @property
    def n_players(self) -> int:
        return len(self.B)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dims(self) -> list[int]:
        return [b.shape[1] for b in self.B]

    @property
    def output_dim(self) -> int:
        return self.C[0].shape[0]

    @property
    def has_constraints(self) -> bool:
        return bool(self.G_x.shape[0] or self.g_G.size or any(G.shape[0] for G in self.G_u))

    def with_structure(self, structure: StructuralPattern | None) -> "GameSpec":
        return GameSpec(
            A=self.A, B=self.B, C=self.C, D=self.D, G_x=self.G_x, g_x=self.g_x,
            G_u=self.G_u, g_u=self.g_u, G_G=self.G_G, g_G=self.g_G, noise=self.noise,
            structure=structure, noise_covariance=self.noise_covariance, name=self.name,
            metadata=dict(self.metadata),
        )

    # -- serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "A": self.A.tolist(),
            "B": [b.tolist() for b in self.B],
            "C": [c.tolist() for c in self.C],
            "D": [[d.tolist() for d in row] for row in self.D],
            "state_constraints": {"G": self.G_x.tolist(), "g": self.g_x.tolist()},
            "input_constraints": [
                {"G": G.tolist(), "g": g.tolist()} for G, g in zip(self.G_u, self.g_u)
            ],
            "coupled_constraints": {"G": [G.tolist() for G in self.G_G], "g": self.g_G.tolist()},
            "noise": None if self.noise is None else {"kind": self.noise.kind, "P": self.noise.P.tolist()},
            "metadata": self.metadata,
        }
        if self.noise_covariance is not None:
            out["noise_covariance"] = self.noise_covariance.tolist()
        if self.structure is not None:
            st = self.structure
            out["structure"] = {"d_a": st.d_a, "d_s": st.d_s, "horizon": st.horizon,
                                "S_x": st.S_x.tolist(), "S_u": [m.tolist() for m in st.S_u]}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GameSpec":
        try:
            npl = len(data["B"])
            nx = len(data["A"])
            nus = [np.array(b, dtype=float).reshape(nx, -1).shape[1] for b in data["B"]]
            sc = data.get("state_constraints") or {}
            ic = data.get("input_constraints") or [None] * npl
            cc = data.get("coupled_constraints") or {}
            noise = data.get("noise")
            spec = cls(
                A=data["A"],
                B=[_as_matrix(b, f"B[{p}]", rows=nx) for p, b in enumerate(data["B"])],
                C=data["C"],
                D=data["D"],
                G_x=np.array(sc.get("G", []), dtype=float).reshape(-1, nx),
                g_x=sc.get("g", []),
                G_u=[None if c is None else np.array(c["G"], dtype=float).reshape(len(c["g"]), nus[p])
                     for p, c in enumerate(ic)],
                g_u=[None if c is None else c["g"] for c in ic],
                G_G=None if cc.get("G") is None else [
                    np.array(G, dtype=float).reshape(len(cc.get("g", [])), nus[p]) for p, G in enumerate(cc["G"])],
                g_G=cc.get("g", []),
                noise=None if noise is None else NoiseModel(noise["kind"], np.array(noise["P"], dtype=float)),
                noise_covariance=data.get("noise_covariance"),
                name=data.get("name", "game"),
                metadata=dict(data.get("metadata", {})),
            )
        except KeyError as exc:
            raise ModelError(f"missing field {exc.args[0]!r}", str(exc.args[0])) from None
        st = data.get("structure")
        if st is not None:
            if "S_x" in st:
                pattern = StructuralPattern(st["d_a"], st["d_s"], np.array(st["S_x"], dtype=float),
                                            tuple(np.array(m, dtype=float) for m in st["S_u"]))
            else:
                pattern = delay_sparsity(spec, st["d_a"], st["d_s"], st["horizon"])
            spec = spec.with_structure(pattern)
        return spec

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load_json(cls, path) -> "GameSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -----------------------------------------------------------------------------
# Assumption checks
# -----------------------------------------------------------------------------


@dataclass
class ValidationReport:
    """Per-player pass/fail of the standing assumptions plus ``rho(A)``."""

    spectral_radius: float
    players: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(all(v for k, v in pl.items() if k != "player") for pl in self.players)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "spectral_radius": self.spectral_radius,
            "players": self.players,
            "notes": self.notes,
        }


def _rank(M: np.ndarray) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s >= RANK_TOL * max(s[0], 1e-300))) if s[0] > 0 else 0


def is_stabilizable(A: np.ndarray, B: np.ndarray) -> bool:
    """PBH test on the eigenvalues of ``A`` with modulus >= 1."""
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1.0 - 1e-12:
            if _rank(np.hstack([lam * np.eye(n) - A, B])) < n:
                return False
    return True


def is_detectable(C: np.ndarray, A: np.ndarray) -> bool:
    return is_stabilizable(A.T, C.T)


def validate_assumptions(spec: GameSpec) -> ValidationReport:
    """Check stabilisability, detectability, rank and orthogonality per player."""
    rho = float(np.max(np.abs(np.linalg.eigvals(spec.A)))) if spec.state_dim else 0.0
    report = ValidationReport(spectral_radius=rho)
    for p in range(spec.n_players):
        Dpp = spec.D[p][p]
        orth = all(np.allclose(spec.D[p][q].T @ spec.C[p], 0.0, atol=1e-12) for q in range(spec.n_players))
        report.players.append({
            "player": p,
            "stabilizable": is_stabilizable(spec.A, spec.B[p]),
            "detectable": is_detectable(spec.C[p], spec.A),
            "D_full_column_rank": _rank(Dpp) == Dpp.shape[1],
            "D_orthogonal_to_C": bool(orth),
        })
    needed = spec.state_dim + sum(spec.input_dims)
    if spec.output_dim < needed:
        report.notes.append(f"output dimension {spec.output_dim} is below N_x + sum N_u = {needed}")
    if spec.noise is None and spec.has_constraints:
        report.notes.append("constraints present but the noise set is unbounded")
    return report


# -----------------------------------------------------------------------------
# Information patterns
# -----------------------------------------------------------------------------


def sparsity(M: np.ndarray, tol: float = STRUCTURAL_ZERO_TOL) -> np.ndarray:
    """0/1 pattern of ``M``; entries below ``tol`` times the largest entry count as zero."""
    scale = np.max(np.abs(M)) if M.size else 0.0
    if scale == 0.0:
        return np.zeros(M.shape)
    return (np.abs(M) > tol * scale).astype(float)


def delay_sparsity(spec: GameSpec, d_a: int = 1, d_s: int = 1, N: int = 2) -> StructuralPattern:
    """Masks for actuation delay ``d_a`` and sensing delay ``d_s``.

    Tap ``n`` of the state response may only be supported where
    ``A^k`` is, and player ``p``'s input tap where ``B^p' A^k`` is, with
    ``k = max(0, floor((n - d_a) / d_s))``.
    """
    if d_s < 1 or d_a < 0:
        raise ModelError("need d_s >= 1 and d_a >= 0", "structure")
    if N < 2:
        raise ModelError("horizon must be at least 2", "structure")
    nx = spec.state_dim
    powers = {0: np.eye(nx)}
    S_x = np.zeros((N, nx, nx))
    S_u = [np.zeros((N, nu, nx)) for nu in spec.input_dims]
    for n in range(1, N + 1):
        k = max(0, (n - d_a) // d_s)
        while k not in powers:
            j = max(powers)
            nxt = spec.A @ powers[j]
            scale = np.max(np.abs(nxt))
            powers[j + 1] = nxt / scale if scale > 0 else nxt
        S_x[n - 1] = sparsity(powers[k])
        for p, B in enumerate(spec.B):
            S_u[p][n - 1] = sparsity(B.T @ powers[k])
    return StructuralPattern(d_a=d_a, d_s=d_s, S_x=S_x, S_u=tuple(S_u))


# -----------------------------------------------------------------------------
# Generators
# -----------------------------------------------------------------------------


def chain_offsets(n_nodes: int, n_players: int, block: int = 2) -> list[int]:
    if n_players == 1:
        return [0]
    span = n_nodes - block
    return [int(round(p * span / (n_players - 1))) for p in range(n_players)]


def build_chain_game(n_nodes: int = 14, betas: Sequence[float] = (10.0, 40.0, 10.0),
                     input_bound: float = 10.0) -> GameSpec:
    """Chain of scalar nodes with players actuating two adjacent nodes each.

    The dynamics matrix is tridiagonal (1 on the diagonal, 0.2 above, -0.2
    below).  Player ``p`` pays ``||x||^2 + beta_p ||u^p||^2`` and must keep
    ``|u_1 + u_2| <= input_bound`` for every disturbance in the unit infinity ball.
    """
    betas = [float(b) for b in betas]
    npl = len(betas)
    if npl == 0:
        raise ModelError("at least one player is required", "betas")
    if any(b <= 0 for b in betas):
        raise ModelError("weights must be positive", "betas")
    if n_nodes < 2 * npl:
        raise ModelError(f"{n_nodes} nodes cannot host {npl} two-input players", "n_nodes")
    A = np.eye(n_nodes) + 0.2 * np.eye(n_nodes, k=1) - 0.2 * np.eye(n_nodes, k=-1)
    offsets = chain_offsets(n_nodes, npl)
    nu_total = 2 * npl
    nz = n_nodes + nu_total
    B, C, G_u, g_u = [], [], [], []
    D = [[np.zeros((nz, 2)) for _ in range(npl)] for _ in range(npl)]
    for p, (beta, off) in enumerate(zip(betas, offsets)):
        Bp = np.zeros((n_nodes, 2))
        Bp[off:off + 2, :] = np.eye(2)
        B.append(Bp)
        C.append(np.vstack([np.eye(n_nodes), np.zeros((nu_total, n_nodes))]))
        D[p][p][n_nodes + 2 * p:n_nodes + 2 * p + 2, :] = np.sqrt(beta) * np.eye(2)
        G_u.append(np.array([[1.0, 1.0], [-1.0, -1.0]]) / input_bound)
        g_u.append(np.ones(2))
    return GameSpec(
        A=A, B=B, C=C, D=D, G_u=G_u, g_u=g_u,
        noise=NoiseModel.infinity_ball(np.eye(n_nodes)),
        name="chain",
        metadata={"generator": "chain", "n_nodes": n_nodes, "betas": betas, "offsets": offsets,
                  "input_bound": input_bound},
    )


def build_market_game(rng_seed: int = 0, tau: float = 1.2, dt: float = 0.25, u_avg: float = 0.5,
                      d_base: float = 10.0, alpha_range=(5.0, 15.0), beta_range=(0.3, 0.6),
                      b_range=(0.5, 1.5), n_players: int = 4) -> GameSpec:
    """Price competition between companies with first-order demand dynamics.

    Demand deviations follow a zero-order-hold discretization of
    ``tau d' = -d - sum_q Bt[p, q] u^q``.  Player ``p`` sets its price ``u^p``
    and its input matrix is ``-(1/tau) (A - I) Bt[:, p]``.  The average price
    must stay within ``u_avg`` for every disturbance in the unit infinity ball.
    ``d_base`` is the baseline demand around which the state is a deviation;
    it is recorded as metadata only.
    """
    if tau <= 0 or dt <= 0:
        raise ModelError("tau and dt must be positive", "market")
    for name, rng_ in (("alpha_range", alpha_range), ("beta_range", beta_range), ("b_range", b_range)):
        if len(rng_) != 2 or not rng_[0] < rng_[1]:
            raise ModelError("sampling range must satisfy low < high", name)
    rng = np.random.default_rng(rng_seed)
    B_tilde = rng.uniform(b_range[0], b_range[1], size=(n_players, n_players))
    alphas = rng.uniform(alpha_range[0], alpha_range[1], size=n_players)
    betas = rng.uniform(beta_range[0], beta_range[1], size=n_players)
    nx = n_players
    A = np.exp(-tau * dt) * np.eye(nx)
    gain = -(1.0 / tau) * (A - np.eye(nx))
    nz = nx + n_players
    B, C = [], []
    D = [[np.zeros((nz, 1)) for _ in range(n_players)] for _ in range(n_players)]
    for p in range(n_players):
        B.append(gain @ B_tilde[:, [p]])
        C.append(np.sqrt(alphas[p]) * np.vstack([np.eye(nx), np.zeros((n_players, nx))]))
        D[p][p][nx + p, 0] = np.sqrt(betas[p])
    G_G = [np.array([[1.0], [-1.0]]) / (n_players * u_avg) for _ in range(n_players)]
    return GameSpec(
        A=A, B=B, C=C, D=D, G_G=G_G, g_G=np.ones(2),
        noise=NoiseModel.infinity_ball(np.eye(nx)),
        name="market",
        metadata={
            "generator": "market", "seed": rng_seed, "tau": tau, "dt": dt, "u_avg": u_avg,
            "d_base": d_base, "B_tilde": B_tilde.tolist(), "alpha": alphas.tolist(),
            "beta": betas.tolist(),
        },
    )


GENERATORS = {"chain": build_chain_game, "market": build_market_game}

"""Contraction estimates for the best-response map.

Without active constraints the best response of player ``p`` is affine,
``V^p = -(H^{pp})^{-1} (H^{p,-p} V^{-p} + H^{p0})``, so its Lipschitz
constant in the opponents' responses is governed by ``(H^{pp})^+ H^{p,-p}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .best_response import (BestResponder, HessianBlocks, InfeasibleResponse, assemble_hessians,
                            unconstrained_best_response)
from .game_model import GameSpec
from .sls_core import FirKernel


@dataclass
class LipschitzReport:
    """Per-player constants and their root-sum-square aggregate.

    ``joint_norm`` is the operator norm of the whole linear part of the joint
    best-response map, a tighter constant than ``L``.
    """

    per_player: np.ndarray
    kappa: np.ndarray
    coupling_norm: np.ndarray
    joint_norm: float
    advisory: bool = False
    empirical: float | None = None
    notes: list = field(default_factory=list)

    @property
    def L(self) -> float:
        return float(np.sqrt(np.sum(self.per_player ** 2)))

    def predicted_rate(self, eta: float) -> float:
        return predicted_rate(eta, self.L)

    def to_dict(self) -> dict:
        return {
            "L": self.L,
            "per_player": self.per_player.tolist(),
            "kappa": self.kappa.tolist(),
            "coupling_norm": self.coupling_norm.tolist(),
            "joint_norm": self.joint_norm,
            "advisory": self.advisory,
            "empirical": self.empirical,
            "notes": list(self.notes),
        }


def pseudo_inverse(H: np.ndarray, cutoff: float = 1e-10) -> np.ndarray:
    """Pseudo-inverse of a symmetric matrix, eigenvalues below ``cutoff * max`` dropped."""
    lam, V = np.linalg.eigh(0.5 * (H + H.T))
    top = np.max(np.abs(lam)) if lam.size else 0.0
    keep = np.abs(lam) > cutoff * top
    return (V[:, keep] / lam[keep]) @ V[:, keep].T


def operator_norm(M: np.ndarray, tol: float = 1e-10, max_iters: int = 10000, seed: int = 0) -> float:
    """Spectral norm by power iteration on ``M' M``."""
    if M.size == 0:
        return 0.0
    x = np.random.default_rng(seed).standard_normal(M.shape[1])
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(max_iters):
        y = M.T @ (M @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        if abs(ny - est) <= tol * ny:
            est = ny
            break
        est = ny
    return float(np.sqrt(est))


def lipschitz_constants(hess: HessianBlocks, advisory: bool = False) -> LipschitzReport:
    """Constants ``L^p = (1 + kappa(H^{pp})) ||(H^{pp})^+ H^{p,-p}||``.

    Parameters
    ----------
    hess : HessianBlocks
    advisory : bool
        Set when the game has constraints that may be active, in which case the
        constants describe the unconstrained map only.
    """
    npl = hess.n_players
    per, kap, cpl = np.zeros(npl), np.zeros(npl), np.zeros(npl)
    rows = []
    for p in range(npl):
        Hpp = hess.H[p][p]
        Hinv = pseudo_inverse(Hpp)
        kap[p] = operator_norm(Hinv) * operator_norm(Hpp)
        M = Hinv @ hess.coupling(p)
        cpl[p] = operator_norm(M)
        per[p] = (1.0 + kap[p]) * cpl[p]
        blocks = [np.zeros_like(hess.H[p][q]) if q == p else -Hinv @ hess.H[p][q] for q in range(npl)]
        rows.append(np.hstack(blocks))
    joint = operator_norm(np.vstack(rows)) if npl > 1 else 0.0
    notes = ["constraints present: constants describe the unconstrained map"] if advisory else []
    return LipschitzReport(per, kap, cpl, joint, advisory, notes=notes)


def game_lipschitz(spec: GameSpec, N: int) -> LipschitzReport:
    return lipschitz_constants(assemble_hessians(spec, N), advisory=spec.has_constraints)


def predicted_rate(eta: float, L: float) -> float:
    """Contraction factor ``(1 - eta) + eta L`` of the relaxed iteration."""
    return (1.0 - eta) + eta * L


def _random_profile(spec: GameSpec, N: int, rng, scale: float, base=None) -> list[FirKernel]:
    out = []
    for p, nu in enumerate(spec.input_dims):
        taps = scale * rng.standard_normal((N - 1, nu, spec.state_dim))
        if base is not None:
            taps = taps + base[p].taps
        out.append(FirKernel(taps))
    return out


def empirical_lipschitz(spec: GameSpec, config, n_samples: int = 20, rng=None, scale: float = 1.0,
                        base=None, constrained: bool | None = None) -> tuple[float, np.ndarray]:
    """Largest observed ``||BR(x) - BR(y)|| / ||x - y||`` over random profile pairs.

    Profiles are Gaussian perturbations of ``base`` (zero by default).  Pairs
    for which some best response is infeasible are skipped.  With
    ``constrained=False`` the closed-form unconstrained response is used; by
    default the constrained program is solved whenever the game has
    constraints or a terminal bound.

    Returns
    -------
    max_ratio : float
    ratios : ndarray
        Ratio of every retained pair.
    """
    rng = np.random.default_rng(rng)
    N = config.N
    if constrained is None:
        constrained = spec.has_constraints or config.gamma is not None or config.exact_fir
    if constrained:
        opts = config.response_options(spec)
        hess = assemble_hessians(spec, N)
        responders = [BestResponder(spec, p, opts, hess) for p in range(spec.n_players)]

        def br(profile):
            return [r.solve(profile)[0] for r in responders]
    else:
        hess = assemble_hessians(spec, N)

        def br(profile):
            return [unconstrained_best_response(p, hess, profile) for p in range(spec.n_players)]

    ratios = []
    for _ in range(n_samples):
        x = _random_profile(spec, N, rng, scale, base)
        y = _random_profile(spec, N, rng, scale, base)
        try:
            bx, by = br(x), br(y)
        except InfeasibleResponse:
            continue
        num = np.sqrt(sum(np.sum((a.taps - b.taps) ** 2) for a, b in zip(bx, by)))
        den = np.sqrt(sum(np.sum((a.taps - b.taps) ** 2) for a, b in zip(x, y)))
        ratios.append(num / den)
    ratios = np.array(ratios)
    return (float(ratios.max()) if ratios.size else float("nan")), ratios

"""FIR kernel algebra, system responses and the internal-state controller.

Tap indices are 1-based in the mathematical sense (``Phi_{x,1} = I``) and stored
0-based: ``kernel.taps[n - 1]`` is tap ``n``.  Convolution uses
``(Phi * w)_t = sum_n tap_n w_{t-n+1}``, so in closed loop started from
``x_0 = 0`` the state satisfies ``x_{t+1} = (Phi_x * w)_t`` and
``u_{t+1} = (Phi_u * w)_t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .game_model import GameSpec, ModelError


@dataclass(frozen=True)
class FirKernel:
    """A finite sequence of equally-sized matrices."""

    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=float)
        if taps.ndim != 3 or taps.shape[0] < 1:
            raise ModelError(f"taps must have shape (horizon, rows, cols), got {taps.shape}", "kernel")
        object.__setattr__(self, "taps", taps)

    @classmethod
    def zeros(cls, horizon: int, rows: int, cols: int) -> "FirKernel":
        return cls(np.zeros((horizon, rows, cols)))

    @property
    def horizon(self) -> int:
        return self.taps.shape[0]

    @property
    def rows(self) -> int:
        return self.taps.shape[1]

    @property
    def cols(self) -> int:
        return self.taps.shape[2]

    def tap(self, n: int) -> np.ndarray:
        """Tap ``n`` (1-based); zero outside the stored range."""
        if 1 <= n <= self.horizon:
            return self.taps[n - 1]
        return np.zeros((self.rows, self.cols))

    def norm(self) -> float:
        """Frobenius norm of the stacked taps."""
        return float(np.linalg.norm(self.taps))

    def stacked(self) -> np.ndarray:
        """Taps stacked vertically into a ``(horizon*rows, cols)`` matrix."""
        return self.taps.reshape(self.horizon * self.rows, self.cols)

    def __add__(self, other: "FirKernel") -> "FirKernel":
        return FirKernel(self.taps + other.taps)

    def __sub__(self, other: "FirKernel") -> "FirKernel":
        return FirKernel(self.taps - other.taps)

    def __mul__(self, scalar: float) -> "FirKernel":
        return FirKernel(self.taps * scalar)

    __rmul__ = __mul__


def _check_inputs(spec: GameSpec, phi_u, N: int):
    if len(phi_u) != spec.n_players:
        raise ModelError(f"expected {spec.n_players} input responses, got {len(phi_u)}", "phi_u")
    for p, k in enumerate(phi_u):
        shape = (N - 1, spec.input_dims[p], spec.state_dim)
        if k.taps.shape != shape:
            raise ModelError(f"expected taps of shape {shape}, got {k.taps.shape}", f"phi_u[{p}]")


def propagate_phi_x(spec: GameSpec, phi_u, N: int) -> FirKernel:
    """State response generated by the input responses ``phi_u``.

    ``Phi_{x,1} = I`` and ``Phi_{x,n+1} = A Phi_{x,n} + sum_p B^p Phi^p_{u,n}``.
    """
    _check_inputs(spec, phi_u, N)
    nx = spec.state_dim
    taps = np.zeros((N, nx, nx))
    taps[0] = np.eye(nx)
    for n in range(N - 1):
        nxt = spec.A @ taps[n]
        for B, k in zip(spec.B, phi_u):
            nxt += B @ k.taps[n]
        taps[n + 1] = nxt
    return FirKernel(taps)


def sls_residual(spec: GameSpec, phi_x: FirKernel, phi_u) -> float:
    """Largest per-tap Frobenius violation of the achievability recursion."""
    N = phi_x.horizon
    res = np.linalg.norm(phi_x.taps[0] - np.eye(spec.state_dim))
    for n in range(N - 1):
        r = phi_x.taps[n + 1] - spec.A @ phi_x.taps[n]
        for B, k in zip(spec.B, phi_u):
            r = r - B @ k.tap(n + 1)
        res = max(res, np.linalg.norm(r))
    return float(res)


def toeplitz_matrix(k: FirKernel, T: int) -> np.ndarray:
    """Block lower-triangular Toeplitz operator of ``k`` on ``T`` stacked samples.

    Block ``(i, j)`` is the tap with 0-based storage index ``i - j``, so that
    ``M @ w.reshape(-1)`` equals ``convolve(k, w).reshape(-1)``.
    """
    r, c = k.rows, k.cols
    M = np.zeros((T * r, T * c))
    for i in range(T):
        for j in range(max(0, i - k.horizon + 1), i + 1):
            M[i * r:(i + 1) * r, j * c:(j + 1) * c] = k.taps[i - j]
    return M


def convolve(k: FirKernel, w: np.ndarray) -> np.ndarray:
    """Causal convolution ``(k * w)_t = sum_n tap_n w_{t-n+1}`` of a ``(T, cols)`` signal."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[1] != k.cols:
        raise ModelError(f"signal must have shape (T, {k.cols}), got {w.shape}", "signal")
    T = w.shape[0]
    out = np.zeros((T, k.rows))
    for n in range(min(k.horizon, T)):
        out[n:] += w[:T - n] @ k.taps[n].T
    return out


def convolve_kernels(a: FirKernel, b: FirKernel, L: int | None = None) -> FirKernel:
    """Kernel of the composition ``a * b`` truncated to ``L`` taps."""
    L = a.horizon + b.horizon - 1 if L is None else L
    taps = np.zeros((L, a.rows, b.cols))
    for n in range(min(a.horizon, L)):
        for m in range(min(b.horizon, L - n)):
            taps[n + m] += a.taps[n] @ b.taps[m]
    return FirKernel(taps)


@dataclass(frozen=True)
class StrategyProfile:
    """Joint input responses at one iterate plus bookkeeping copies of ``Phi_x``.

    ``phi_x_per_player[p]`` is the state response computed with player ``p``'s
    newest kernel and the opponents' previous ones.
    """

    phi_u: tuple
    phi_x_joint: FirKernel
    phi_x_per_player: tuple

    @classmethod
    def from_phi_u(cls, spec: GameSpec, phi_u, phi_x_per_player=None) -> "StrategyProfile":
        N = phi_u[0].horizon + 1
        phi_x = propagate_phi_x(spec, phi_u, N)
        copies = tuple(phi_x_per_player) if phi_x_per_player is not None else (phi_x,) * spec.n_players
        return cls(tuple(phi_u), phi_x, copies)

    @classmethod
    def zeros(cls, spec: GameSpec, N: int) -> "StrategyProfile":
        return cls.from_phi_u(spec, [FirKernel.zeros(N - 1, nu, spec.state_dim) for nu in spec.input_dims])

    @property
    def horizon(self) -> int:
        return self.phi_x_joint.horizon

    def stacked_u(self) -> np.ndarray:
        return np.concatenate([k.taps.reshape(-1) for k in self.phi_u])


@dataclass(frozen=True)
class PolicyKernel:
    """Truncated policy ``Phi_u^p * Phi_x^{-1}`` plus the pair it came from."""

    taps: FirKernel
    phi_x: FirKernel
    phi_u: FirKernel


def policy_kernel(phi_u_p: FirKernel, phi_x: FirKernel, L: int | None = None) -> PolicyKernel:
    """Deconvolve ``phi_u_p`` by ``phi_x`` with forward substitution.

    Parameters
    ----------
    phi_u_p : FirKernel
        Input response of one player.
    phi_x : FirKernel
        State response; its first tap must be invertible.
    L : int, optional
        Number of policy taps to keep, ``4 * phi_x.horizon`` by default.
    """
    L = 4 * phi_x.horizon if L is None else L
    if L < 1:
        raise ModelError("truncation length must be positive", "L")
    inv0 = np.linalg.inv(phi_x.taps[0])
    taps = np.zeros((L, phi_u_p.rows, phi_x.cols))
    for n in range(L):
        acc = phi_u_p.tap(n + 1).copy()
        for m in range(max(0, n - phi_x.horizon + 1), n):
            acc -= taps[m] @ phi_x.taps[n - m]
        taps[n] = acc @ inv0
    return PolicyKernel(FirKernel(taps), phi_x, phi_u_p)


@dataclass
class ControllerState:
    """Rolling internal state of the disturbance-estimating controller.

    ``xi`` holds past internal states, most recent first.
    """

    phi_x: FirKernel
    phi_u: FirKernel
    xi: np.ndarray = field(default=None)
    t: int = 0

    def __post_init__(self):
        if self.xi is None:
            depth = max(self.phi_x.horizon, self.phi_u.horizon)
            self.xi = np.zeros((depth, self.phi_x.cols))

    @classmethod
    def from_policy(cls, policy: PolicyKernel) -> "ControllerState":
        return cls(policy.phi_x, policy.phi_u)


def controller_step(state: ControllerState, x_t: np.ndarray) -> np.ndarray:
    """Advance the internal state with measurement ``x_t`` and return ``u_t``.

    ``xi_t = x_t - sum_{tau>=1} Phi_{x,tau+1} xi_{t-tau}`` and
    ``u_t = sum_{tau>=0} Phi_{u,tau+1} xi_{t-tau}``, with both sums truncated to
    the stored taps.  The first call uses ``xi_0 = x_0``.
    """
    hx = state.phi_x.horizon
    xi_t = np.asarray(x_t, dtype=float).copy()
    if hx > 1:
        # xi[0] currently holds xi_{t-1}
        xi_t -= np.einsum("nij,nj->i", state.phi_x.taps[1:], state.xi[:hx - 1])
    state.xi = np.roll(state.xi, 1, axis=0)
    state.xi[0] = xi_t
    hu = state.phi_u.horizon
    u = np.einsum("nij,nj->i", state.phi_u.taps, state.xi[:hu])
    state.t += 1
    return u

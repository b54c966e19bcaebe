"""Coordinates of the decision variables and the affine map to the state response.

Each player's input response with ``N - 1`` taps of size ``N_u x N_x`` is
vectorized column by column: entry ``(n, i, j)`` (tap, input row, disturbance
column) sits at ``j * (N-1) * N_u + n * N_u + i``.  With this ordering the
state response is ``vec(Phi_x) = vec(F0) + sum_p (I_{N_x} kron F^p) vec(Phi_u^p)``,
where the state response is vectorized the same way with ``N`` taps.

Structural masks remove coordinates from the decision vector; the remaining
"reduced" coordinates of all players are concatenated into the joint vector.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .game_model import GameSpec, StructuralPattern
from .sls_core import FirKernel


def response_operator(A: np.ndarray, B: np.ndarray, N: int) -> np.ndarray:
    """Block lower-triangular map from ``N-1`` input taps to ``N`` state taps.

    Block ``(n, m)`` (0-based) is ``A^(n-1-m) B`` for ``m < n`` and zero otherwise.
    """
    nx, nu = B.shape
    F = np.zeros((N * nx, (N - 1) * nu))
    powers_B = [B]
    for _ in range(N - 2):
        powers_B.append(A @ powers_B[-1])
    for n in range(1, N):
        for m in range(n):
            F[n * nx:(n + 1) * nx, m * nu:(m + 1) * nu] = powers_B[n - 1 - m]
    return F


def free_response(A: np.ndarray, N: int) -> np.ndarray:
    """Stacked ``(A^0; A^1; ...; A^(N-1))``, the response with zero inputs."""
    nx = A.shape[0]
    out = np.zeros((N * nx, nx))
    P = np.eye(nx)
    for n in range(N):
        out[n * nx:(n + 1) * nx] = P
        P = A @ P
    return out


def taps_to_vec(taps: np.ndarray) -> np.ndarray:
    """``(H, rows, cols)`` taps to the column-major vector ordering."""
    return np.ascontiguousarray(np.transpose(taps, (2, 0, 1))).reshape(-1)


def vec_to_taps(v: np.ndarray, horizon: int, rows: int, cols: int) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(v.reshape(cols, horizon, rows), (1, 2, 0)))


class DecisionLayout:
    """Index bookkeeping for all players' (possibly masked) input-response taps."""

    def __init__(self, spec: GameSpec, N: int, structure: StructuralPattern | None = None):
        if N < 2:
            raise ValueError("FIR horizon must be at least 2")
        self.spec = spec
        self.N = N
        self.structure = structure
        nx = spec.state_dim
        self.masks = []
        self.full_sizes = []
        for p, nu in enumerate(spec.input_dims):
            if structure is None:
                mask = np.ones((N - 1, nu, nx), dtype=bool)
            else:
                if structure.horizon < N:
                    raise ValueError(f"structural pattern covers {structure.horizon} taps, need {N}")
                mask = structure.S_u[p][:N - 1] > 0.5
            self.masks.append(mask)
            self.full_sizes.append(mask.size)
        self.index = [np.flatnonzero(taps_to_vec(m.astype(float))) for m in self.masks]
        self.sizes = [idx.size for idx in self.index]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.size = int(self.offsets[-1])

    # -- conversions -----------------------------------------------------------
    def player_slice(self, p: int) -> slice:
        return slice(self.offsets[p], self.offsets[p + 1])

    def reduce(self, p: int, kernel: FirKernel) -> np.ndarray:
        return taps_to_vec(kernel.taps)[self.index[p]]

    def expand(self, p: int, v: np.ndarray) -> FirKernel:
        full = np.zeros(self.full_sizes[p])
        full[self.index[p]] = v
        return FirKernel(vec_to_taps(full, self.N - 1, self.spec.input_dims[p], self.spec.state_dim))

    def joint(self, phi_u) -> np.ndarray:
        return np.concatenate([self.reduce(p, k) for p, k in enumerate(phi_u)])

    def split(self, v: np.ndarray) -> list[FirKernel]:
        return [self.expand(p, v[self.player_slice(p)]) for p in range(self.spec.n_players)]

    def selection(self, p: int) -> sp.csr_matrix:
        """Sparse ``full x reduced`` embedding of player ``p``'s coordinates."""
        n_full, n_red = self.full_sizes[p], self.sizes[p]
        return sp.csr_matrix((np.ones(n_red), (self.index[p], np.arange(n_red))), shape=(n_full, n_red))

    # -- state response --------------------------------------------------------
    @cached_property
    def response_blocks(self) -> list[np.ndarray]:
        return [response_operator(self.spec.A, B, self.N) for B in self.spec.B]

    @cached_property
    def free_state(self) -> np.ndarray:
        """``vec(Phi_x)`` with all input responses zero."""
        F0 = free_response(self.spec.A, self.N)
        return F0.T.reshape(-1).copy()

    @cached_property
    def state_maps(self) -> list[sp.csr_matrix]:
        """Per player, sparse map from reduced coordinates to ``vec(Phi_x)``."""
        nx = self.spec.state_dim
        out = []
        for p, F in enumerate(self.response_blocks):
            K = sp.kron(sp.identity(nx, format="csr"), sp.csr_matrix(F), format="csr")
            out.append((K @ self.selection(p)).tocsr())
        return out

    @cached_property
    def joint_state_map(self) -> sp.csr_matrix:
        return sp.hstack(self.state_maps, format="csr")

    def state_vec(self, v_joint: np.ndarray) -> np.ndarray:
        return self.free_state + self.joint_state_map @ v_joint

    def state_kernel(self, v_joint: np.ndarray) -> FirKernel:
        nx = self.spec.state_dim
        return FirKernel(vec_to_taps(self.state_vec(v_joint), self.N, nx, nx))

    def terminal_rows(self) -> np.ndarray:
        """Indices of ``vec(Phi_x)`` belonging to the last tap."""
        nx, N = self.spec.state_dim, self.N
        j, r = np.meshgrid(np.arange(nx), np.arange(nx), indexing="ij")
        return (j * N * nx + (N - 1) * nx + r).reshape(-1)

    def masked_state_rows(self) -> np.ndarray:
        """Indices of ``vec(Phi_x)`` forced to zero by the structural pattern."""
        if self.structure is None:
            return np.zeros(0, dtype=int)
        S = self.structure.S_x[:self.N]
        return np.flatnonzero(taps_to_vec(S) < 0.5)

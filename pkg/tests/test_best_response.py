import numpy as np
import pytest

from slsbrd.best_response import (BestResponder, InfeasibleResponse, ResponseOptions, assemble_hessians,
                                  best_response, epsilon_gap, objective_value, quadratic_cost,
                                  unconstrained_best_response)
from slsbrd.game_model import GameSpec, NoiseModel
from slsbrd.robust_constraints import check_feasible_point, compile_constraints
from slsbrd.sls_core import FirKernel, propagate_phi_x

from conftest import random_game


def random_profile(rng, spec, N, scale=0.3):
    return [FirKernel(scale * rng.standard_normal((N - 1, nu, spec.state_dim))) for nu in spec.input_dims]


def test_scalar_hessian_example():
    spec = GameSpec(A=[[0.0]], B=[[[1.0]]], C=[[[1.0], [0.0]]], D=[[[[0.0], [1.0]]]])
    hess = assemble_hessians(spec, 2)
    np.testing.assert_allclose(hess.H[0][0], [[2.0]])


def test_zero_factors_give_zero_coupling(rng):
    spec = random_game(rng, 2, 2)
    spec.C = [np.zeros_like(c) for c in spec.C]
    hess = assemble_hessians(spec, 4)
    assert np.all(hess.H[0][1] == 0)


def test_hessian_lower_bound(rng):
    spec = random_game(rng, 2, 3, [2, 1])
    hess = assemble_hessians(spec, 5)
    for p in range(2):
        lam = np.linalg.eigvalsh(hess.H[p][p]).min()
        Dp = spec.D[p][p]
        assert lam >= np.linalg.eigvalsh(Dp.T @ Dp).min() - 1e-10


def test_objective_plugin_and_scaling(rng):
    spec = GameSpec(A=[[0.0, 0.0], [0.0, 0.0]], B=[np.ones((2, 1))],
                    C=[np.vstack([np.eye(2), np.zeros((1, 2))])], D=[[np.array([[0.0], [0.0], [1.0]])]])
    zero = [FirKernel.zeros(3, 1, 2)]
    assert objective_value(spec, 0, zero) == 2.0
    spec = random_game(rng, 2, 3, cross=True)
    phi = random_profile(rng, spec, 4)
    hess = assemble_hessians(spec, 4)
    for p in range(2):
        assert abs(objective_value(spec, p, phi) - quadratic_cost(hess, spec, p, phi)) < 1e-10
    # J(2x) - 2 J(x) + J(0) equals twice the pure quadratic part
    j = lambda s: objective_value(spec, 0, [s * k for k in phi])
    quad = np.sum(sum(g @ k.taps.reshape(-1, 3) for g, k in zip(hess.G[0], phi)) ** 2)
    assert abs(j(2) - 2 * j(1) + j(0) - 2 * quad) < 1e-9 * max(1.0, quad)


def test_gradient_matches_finite_differences(rng):
    spec = random_game(rng, 2, 2, [1, 2], cross=True)
    N = 4
    hess = assemble_hessians(spec, N)
    phi = random_profile(rng, spec, N)
    p = 1
    V = [k.taps.reshape(-1, 2) for k in phi]
    grad = 2 * (hess.H0[p] + sum(hess.H[p][q] @ V[q] for q in range(2)))
    h = 1e-5
    fd = np.zeros_like(V[p])
    for idx in np.ndindex(*V[p].shape):
        for s in (1, -1):
            W = V[p].copy()
            W[idx] += s * h
            trial = list(phi)
            trial[p] = FirKernel(W.reshape(phi[p].taps.shape))
            fd[idx] += s * objective_value(spec, p, trial)
    fd /= 2 * h
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-6)


def test_unconstrained_response_properties(rng):
    spec = random_game(rng, 2, 2)
    N = 5
    hess = assemble_hessians(spec, N)
    x, y = random_profile(rng, spec, N), random_profile(rng, spec, N)
    a = 0.3
    mix = [a * u + (1 - a) * v for u, v in zip(x, y)]
    bx, by, bm = (unconstrained_best_response(0, hess, z) for z in (x, y, mix))
    np.testing.assert_allclose(bm.taps, a * bx.taps + (1 - a) * by.taps, atol=1e-9)
    # stationarity of the player's cost at the response
    trial = list(x)
    trial[0] = bx
    base = objective_value(spec, 0, trial)
    for _ in range(20):
        d = 1e-3 * rng.standard_normal(bx.taps.shape)
        trial[0] = FirKernel(bx.taps + d)
        assert objective_value(spec, 0, trial) >= base - 1e-12


def test_zero_response_when_no_affine_term():
    spec = GameSpec(A=[[0.0]], B=[[[1.0]], [[1.0]]], C=[np.zeros((3, 1))] * 2,
                    D=[[np.array([[0.0], [1.0], [0.0]]), np.zeros((3, 1))],
                       [np.zeros((3, 1)), np.array([[0.0], [0.0], [1.0]])]])
    hess = assemble_hessians(spec, 3)
    out = unconstrained_best_response(0, hess, [FirKernel.zeros(2, 1, 1)] * 2)
    assert np.all(out.taps == 0)


def test_program_matches_closed_form(rng):
    spec = random_game(rng, 2, 2, radius=0.5)
    N = 6
    phi = random_profile(rng, spec, N)
    hess = assemble_hessians(spec, N)
    closed = unconstrained_best_response(1, hess, phi)
    solved = BestResponder(spec, 1, ResponseOptions(N, gamma=None), hess).solve(phi)[0]
    np.testing.assert_allclose(solved.taps, closed.taps, atol=1e-7)


def test_constrained_response_is_optimal_and_feasible(rng):
    spec = random_game(rng, 2, 2, [1, 1], constrained=True, radius=0.8)
    spec.g_u = [0.3 * g for g in spec.g_u]
    N = 5
    phi = random_profile(rng, spec, N, 0.05)
    resp = BestResponder(spec, 0, ResponseOptions(N, 0.95), assemble_hessians(spec, N))
    k, res = resp.solve(phi)
    assert res.ok
    trial = list(phi)
    trial[0] = k
    comp = compile_constraints(spec, N, player=0)
    assert check_feasible_point(comp, trial).feasible(1e-8)
    assert np.sum(propagate_phi_x(spec, trial, N).taps[-1] ** 2) <= 0.95 + 1e-8
    base = objective_value(spec, 0, trial)
    for _ in range(100):
        d = 1e-3 * rng.standard_normal(k.taps.shape)
        cand = list(trial)
        cand[0] = FirKernel(k.taps + d)
        if check_feasible_point(comp, cand).feasible(0.0) and \
                np.sum(propagate_phi_x(spec, cand, N).taps[-1] ** 2) <= 0.95:
            assert objective_value(spec, 0, cand) >= base - 1e-8


def test_exact_fir_response(rng):
    spec = random_game(rng, 1, 2, [2], radius=1.2)
    N = 5
    k = best_response(0, spec, [FirKernel.zeros(N - 1, 2, 2)], N, exact_fir=True)
    assert np.linalg.norm(propagate_phi_x(spec, [k], N).taps[-1]) < 1e-9


def test_exact_fir_uncontrollable_is_infeasible():
    spec = GameSpec(A=np.diag([1.5, 0.5]), B=[np.array([[0.0], [1.0]])],
                    C=[np.vstack([np.eye(2), np.zeros((1, 2))])], D=[[np.array([[0.0], [0.0], [1.0]])]])
    with pytest.raises(InfeasibleResponse) as exc:
        best_response(0, spec, [FirKernel.zeros(3, 1, 2)], 4, exact_fir=True)
    assert exc.value.player == 0


def test_epsilon_gap(rng):
    spec = random_game(rng, 3, 2)
    phi = random_profile(rng, spec, 4)
    costs = [objective_value(spec, p, phi) for p in range(3)]
    assert abs(epsilon_gap(spec, phi, 0.95) - 0.95 * max(costs)) < 1e-12
    assert epsilon_gap(spec, phi, 0.0) == 0.0

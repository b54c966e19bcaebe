import numpy as np
import pytest

from slsbrd.game_model import GameSpec, ModelError
from slsbrd.sls_core import (ControllerState, FirKernel, StrategyProfile, controller_step, convolve,
                             convolve_kernels, policy_kernel, propagate_phi_x, sls_residual, toeplitz_matrix)

from conftest import random_game


def scalar(a, b=1.0):
    return GameSpec(A=[[a]], B=[[[b]]], C=[[[1.0], [0.0]]], D=[[[[0.0], [1.0]]]])


def zeros_u(spec, N):
    return [FirKernel.zeros(N - 1, nu, spec.state_dim) for nu in spec.input_dims]


def test_propagate_trivial_cases():
    spec = GameSpec(A=np.zeros((2, 2)), B=[np.ones((2, 1))], C=[np.eye(2)], D=[[np.ones((2, 1))]])
    px = propagate_phi_x(spec, zeros_u(spec, 3), 3)
    np.testing.assert_array_equal(px.taps, [np.eye(2), np.zeros((2, 2)), np.zeros((2, 2))])
    spec = GameSpec(A=np.eye(2), B=[np.ones((2, 1))], C=[np.eye(2)], D=[[np.ones((2, 1))]])
    px = propagate_phi_x(spec, zeros_u(spec, 3), 3)
    np.testing.assert_array_equal(px.taps, [np.eye(2)] * 3)
    px = propagate_phi_x(scalar(0.5), [FirKernel([[[-0.5]]])], 2)
    np.testing.assert_array_equal(px.taps.ravel(), [1.0, 0.0])


def test_propagate_shape_error():
    spec = scalar(0.5)
    with pytest.raises(ModelError):
        propagate_phi_x(spec, [FirKernel.zeros(3, 1, 1)], 3)


def test_residual_detects_perturbation(rng):
    spec = random_game(rng, 2, 3, [1, 2])
    N = 6
    phi_u = [FirKernel(rng.standard_normal((N - 1, nu, 3))) for nu in spec.input_dims]
    px = propagate_phi_x(spec, phi_u, N)
    assert sls_residual(spec, px, phi_u) < 1e-12
    taps = px.taps.copy()
    taps[-1, 0, 0] += 1e-3
    assert abs(sls_residual(spec, FirKernel(taps), phi_u) - 1e-3) < 1e-12


def test_toeplitz_matches_convolution(rng):
    k = FirKernel(rng.standard_normal((4, 2, 3)))
    w = rng.standard_normal((7, 3))
    M = toeplitz_matrix(k, 7)
    direct = np.zeros((7, 2))
    for t in range(7):
        for n in range(1, 5):
            if t - n + 1 >= 0:
                direct[t] += k.taps[n - 1] @ w[t - n + 1]
    np.testing.assert_allclose(M @ w.reshape(-1), direct.reshape(-1), atol=1e-13)
    np.testing.assert_allclose(convolve(k, w), direct, atol=1e-13)


def test_identity_and_shift_kernels(rng):
    w = rng.standard_normal((5, 2))
    np.testing.assert_array_equal(convolve(FirKernel([np.eye(2)]), w), w)
    np.testing.assert_array_equal(toeplitz_matrix(FirKernel([np.eye(2)]), 2), np.eye(4))
    K = rng.standard_normal((2, 2))
    out = convolve(FirKernel([np.zeros((2, 2)), K]), np.vstack([[1.0, 0.0], np.zeros((4, 2))]))
    np.testing.assert_allclose(out[1], K[:, 0])
    assert np.all(out[[0, 2, 3, 4]] == 0)
    assert np.all(convolve(FirKernel.zeros(3, 2, 2), w) == 0)


def test_policy_kernel_scalar_series():
    a, b = 0.3, 2.0
    pk = policy_kernel(FirKernel([[[b]]]), FirKernel([[[1.0]], [[a]]]), L=6)
    expected = [b * (-a) ** n for n in range(6)]
    np.testing.assert_allclose(pk.taps.taps.ravel(), expected, rtol=1e-14)


def test_policy_kernel_round_trip(rng):
    px = FirKernel(np.concatenate([[np.eye(3)], 0.3 * rng.standard_normal((4, 3, 3))]))
    pu = FirKernel(rng.standard_normal((4, 2, 3)))
    pk = policy_kernel(pu, px, L=12)
    back = convolve_kernels(pk.taps, px, 12)
    np.testing.assert_allclose(back.taps[:4], pu.taps, atol=1e-10)
    np.testing.assert_allclose(back.taps[4:], 0, atol=1e-10)
    only = policy_kernel(pu, FirKernel([np.eye(3)]), L=4)
    np.testing.assert_allclose(only.taps.taps, pu.taps)
    with pytest.raises(ModelError):
        policy_kernel(pu, px, L=0)


def test_controller_without_recursion(rng):
    pu = FirKernel(rng.standard_normal((3, 1, 2)))
    st = ControllerState(FirKernel([np.eye(2)]), pu)
    xs = rng.standard_normal((5, 2))
    for t, x in enumerate(xs):
        u = controller_step(st, x)
        expect = sum(pu.taps[n] @ xs[t - n] for n in range(3) if t - n >= 0)
        np.testing.assert_allclose(u, expect, atol=1e-14)
    st = ControllerState(FirKernel([np.eye(2)]), FirKernel.zeros(3, 1, 2))
    assert np.all(controller_step(st, xs[0]) == 0)


def test_profile_bookkeeping(rng):
    spec = random_game(rng, 3, 2)
    prof = StrategyProfile.zeros(spec, 4)
    assert prof.horizon == 4
    assert len(prof.phi_x_per_player) == 3
    np.testing.assert_array_equal(prof.phi_x_joint.tap(1), np.eye(2))
    assert np.all(prof.phi_x_joint.tap(9) == 0)
    k = FirKernel(np.ones((2, 1, 1)))
    assert (k + k).taps.sum() == 4 and (2 * k - k).taps.sum() == 2

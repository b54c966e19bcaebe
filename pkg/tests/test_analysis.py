import numpy as np

from slsbrd.analysis import (empirical_lipschitz, game_lipschitz, lipschitz_constants, operator_norm,
                             predicted_rate, pseudo_inverse)
from slsbrd.best_response import HessianBlocks, assemble_hessians, objective_value
from slsbrd.brd_engine import BrdConfig
from slsbrd.game_model import GameSpec
from slsbrd.sls_core import FirKernel

from conftest import random_game


def hessian_by_differences(spec, p, q, N):
    """Mixed second difference of player ``p``'s cost, halved, in the scalar case."""
    h = 0.5

    def J(a, b):
        v = [FirKernel.zeros(N - 1, 1, 1) for _ in range(spec.n_players)]
        v[p] = FirKernel(v[p].taps + a)
        v[q] = FirKernel(v[q].taps + b)
        return objective_value(spec, p, v)

    if p == q:
        return (J(h, 0) - 2 * J(0, 0) + J(-h, 0)) / (2 * h * h)
    return (J(h, h) - J(h, -h) - J(-h, h) + J(-h, -h)) / (8 * h * h)


def blocks(H, H0):
    return HessianBlocks(N=0, F=[None] * len(H), F0=None, G=None, G0=None, H=H, H0=H0)


def test_single_player_has_zero_constant(rng):
    spec = random_game(rng, 1, 2)
    rep = game_lipschitz(spec, 5)
    assert rep.L == 0.0 and rep.joint_norm == 0.0


def test_identity_own_hessian():
    coupling = np.array([[0.3, -0.1], [0.2, 0.4]])
    H = [[np.eye(2), coupling], [coupling.T, np.eye(2)]]
    hess = blocks(H, [np.zeros((2, 1))] * 2)
    rep = lipschitz_constants(hess)
    sig = np.linalg.svd(coupling, compute_uv=False)[0]
    np.testing.assert_allclose(rep.kappa, 1.0, atol=1e-9)
    np.testing.assert_allclose(rep.per_player, 2 * sig, rtol=1e-8)


def test_scalar_game_against_difference_hessian():
    spec = GameSpec(A=[[0.7]], B=[[[1.0]], [[0.5]]],
                    C=[[[1.0], [0.0], [0.0]], [[2.0], [0.0], [0.0]]],
                    D=[[[[0.0], [1.0], [0.0]], [[0.0], [0.0], [0.0]]],
                       [[[0.0], [0.0], [0.0]], [[0.0], [0.0], [3.0]]]])
    rep = game_lipschitz(spec, 2)
    for p, q in ((0, 1), (1, 0)):
        ratio = abs(hessian_by_differences(spec, p, q, 2) / hessian_by_differences(spec, p, p, 2))
        assert abs(rep.coupling_norm[p] - ratio) < 1e-9
        assert abs(rep.per_player[p] - 2 * ratio) < 1e-9


def test_predicted_rate_examples():
    assert predicted_rate(1.0, 0.5) == 0.5
    assert predicted_rate(0.0, 3.0) == 1.0
    assert abs(predicted_rate(0.25, 0.6) - 0.9) < 1e-15


def test_norm_helpers(rng):
    M = rng.standard_normal((7, 4))
    assert abs(operator_norm(M) - np.linalg.svd(M, compute_uv=False)[0]) < 1e-8
    S = M.T @ M
    np.testing.assert_allclose(pseudo_inverse(S), np.linalg.inv(S), rtol=1e-8, atol=1e-10)
    v = rng.standard_normal(4)
    rank_one = np.outer(v, v)
    np.testing.assert_allclose(pseudo_inverse(rank_one), rank_one / (v @ v) ** 2, atol=1e-12)


def test_affine_ratio_constant_for_symmetric_scalar_game(rng):
    # identical scalar players: the linear part is a multiple of a permutation
    spec = GameSpec(A=[[0.6]], B=[[[1.0]], [[1.0]]],
                    C=[[[1.0], [0.0], [0.0]], [[1.0], [0.0], [0.0]]],
                    D=[[[[0.0], [2.0], [0.0]], [[0.0], [0.0], [0.0]]],
                       [[[0.0], [0.0], [0.0]], [[0.0], [0.0], [2.0]]]])
    cfg = BrdConfig(N=2, gamma=None, structure=False)
    _, ratios = empirical_lipschitz(spec, cfg, n_samples=15, rng=rng)
    assert np.ptp(ratios) < 1e-9
    assert abs(ratios[0] - game_lipschitz(spec, 2).coupling_norm[0]) < 1e-9


def test_empirical_ratio_below_bound(rng):
    for _ in range(5):
        spec = random_game(rng, 3, 2, [1, 2, 1])
        cfg = BrdConfig(N=4, gamma=None, structure=False)
        rep = game_lipschitz(spec, cfg.N)
        assert not rep.advisory
        worst, ratios = empirical_lipschitz(spec, cfg, n_samples=20, rng=rng)
        assert worst <= rep.joint_norm * (1 + 1e-9) + 1e-12
        assert worst <= rep.L * (1 + 1e-9)


def test_input_penalty_scaling_does_not_increase_constants(rng):
    for _ in range(5):
        spec = random_game(rng, 2, 2, [1, 2], identity_penalty=True)
        before = game_lipschitz(spec, 4).per_player
        for p in range(2):
            spec.D[p][p] = 3.0 * spec.D[p][p]
        after = game_lipschitz(spec, 4).per_player
        assert np.all(after <= before * (1 + 1e-9))


def test_anisotropic_penalty_scaling_can_raise_condition_number():
    # the state cost ties both inputs together; large penalties push kappa towards kappa(D'D) = 25
    spec = GameSpec(A=[[0.5]], B=[[[1.0, 1.0]]], C=[[[1.0], [0.0], [0.0]]],
                    D=[[[[0.0, 0.0], [1.0, 0.0], [0.0, 0.2]]]])
    small = game_lipschitz(spec, 2).kappa[0]
    spec.D[0][0] = 4.0 * spec.D[0][0]
    assert game_lipschitz(spec, 2).kappa[0] > small


def test_removing_a_player_shrinks_coupling(rng):
    spec = random_game(rng, 3, 2)
    full = assemble_hessians(spec, 4)
    keep = [0, 1]
    sub = blocks([[full.H[p][q] for q in keep] for p in keep], [full.H0[p] for p in keep])
    for p in keep:
        assert operator_norm(sub.coupling(p)) <= operator_norm(full.coupling(p)) * (1 + 1e-9)


def test_constrained_game_flags_advisory(rng):
    spec = random_game(rng, 2, 2, constrained=True)
    rep = game_lipschitz(spec, 4)
    assert rep.advisory and rep.notes
    assert set(rep.to_dict()) >= {"L", "per_player", "joint_norm"}

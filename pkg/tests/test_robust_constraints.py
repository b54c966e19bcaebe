import itertools

import numpy as np
import pytest

from slsbrd.game_model import GameSpec, ModelError, NoiseModel, build_chain_game, build_market_game
from slsbrd.robust_constraints import check_feasible_point, compile_constraints, dump_text, worst_case_lhs
from slsbrd.sls_core import FirKernel, propagate_phi_x

from conftest import random_game


def vertex_sup(g, taps, Pinv):
    """Tap-by-tap maximum over the sign vertices of the unit cube, mapped by ``P^-1``."""
    nx = taps.shape[2]
    verts = np.array(list(itertools.product((-1.0, 1.0), repeat=Pinv.shape[1])))
    total = 0.0
    for n in range(taps.shape[0]):
        vals = verts @ (g @ taps[n] @ Pinv)
        total += vals.max()
    return total


def test_dual_norm_examples():
    taps = np.array([[[1.0, -2.0]]])
    assert worst_case_lhs([1.0], taps, NoiseModel.infinity_ball(np.eye(2))) == 3.0
    assert abs(worst_case_lhs([1.0], taps, NoiseModel.energy_ellipsoid(np.eye(2))) - np.sqrt(5)) < 1e-15


def test_vertex_oracle_with_shape_matrix(rng):
    for _ in range(20):
        nx = rng.integers(1, 5)
        P = rng.standard_normal((nx, nx)) + 3 * np.eye(nx)
        taps = rng.standard_normal((3, 2, nx))
        g = rng.standard_normal(2)
        got = worst_case_lhs(g, taps, NoiseModel.infinity_ball(P))
        assert abs(got - vertex_sup(g, taps, np.linalg.inv(P))) <= 1e-12 * max(1.0, abs(got))


def test_ellipsoid_attained_by_aligned_noise(rng):
    P = np.diag([2.0, 0.5, 1.0])
    taps = rng.standard_normal((4, 1, 3))
    g = np.array([1.0])
    value = worst_case_lhs(g, taps, NoiseModel.energy_ellipsoid(P))
    Pinv = np.linalg.inv(P)
    best = 0.0
    for n in range(4):
        a = g @ taps[n] @ Pinv
        z = a / np.linalg.norm(a)
        best += a @ z
        assert np.linalg.norm(P @ (Pinv @ z)) <= 1 + 1e-12
    assert abs(value - best) < 1e-12


def test_singular_ellipsoid_rejected():
    noise = NoiseModel.infinity_ball(np.array([[1.0, 0.0], [0.0, 1.0]]))
    bad = NoiseModel.__new__(NoiseModel)
    object.__setattr__(bad, "kind", "ellipsoid")
    object.__setattr__(bad, "P", np.zeros((2, 2)))
    with pytest.raises(ModelError):
        worst_case_lhs([1.0], np.ones((1, 1, 2)), bad)
    with pytest.raises(ModelError):
        worst_case_lhs([1.0, 2.0], np.ones((1, 1, 2)), noise)


def test_unconstrained_compiles_empty(rng):
    spec = random_game(rng)
    assert len(compile_constraints(spec, 5)) == 0


def test_bounded_rows_need_bounded_noise(rng):
    spec = random_game(rng, constrained=True)
    spec.noise = None
    with pytest.raises(ModelError):
        compile_constraints(spec, 4)


def test_chain_rows():
    spec = build_chain_game(14, (10, 40, 10))
    comp = compile_constraints(spec, 6, player=1)
    assert [r.origin for r in comp.rows] == ["U", "U"]
    assert comp.rows[1].alias_of == 0
    assert all(r.player == 1 for r in comp.rows)
    sl = comp.layout.player_slice(1)
    for r in comp.rows:
        cols = np.unique(r.M.nonzero()[1])
        assert cols.min() >= sl.start and cols.max() < sl.stop
    assert "alias_of" in dump_text(comp)


def test_market_rows_mix_players():
    spec = build_market_game(0)
    comp = compile_constraints(spec, 5, player=2)
    assert [r.origin for r in comp.rows] == ["G", "G"]
    for r in comp.rows:
        assert r.rhs == 1.0
        cols = np.unique(r.M.nonzero()[1])
        for p in range(4):
            sl = comp.layout.player_slice(p)
            assert np.any((cols >= sl.start) & (cols < sl.stop))


def test_compiled_rows_match_direct_evaluation(rng):
    spec = random_game(rng, 2, 3, [2, 1], constrained=True)
    spec.G_x = rng.standard_normal((2, 3))
    spec.g_x = np.ones(2)
    spec.G_G = [rng.standard_normal((1, 2)), rng.standard_normal((1, 1))]
    spec.g_G = np.ones(1)
    spec = GameSpec(**{k: getattr(spec, k) for k in ("A", "B", "C", "D", "G_x", "g_x", "G_u", "g_u",
                                                     "G_G", "g_G", "noise")})
    N = 5
    comp = compile_constraints(spec, N)
    phi_u = [FirKernel(0.2 * rng.standard_normal((N - 1, nu, 3))) for nu in spec.input_dims]
    rep = check_feasible_point(comp, phi_u)
    px = propagate_phi_x(spec, phi_u, N)
    expected = [worst_case_lhs(g, px, spec.noise) for g in spec.G_x]
    for p in range(2):
        expected += [worst_case_lhs(g, phi_u[p], spec.noise) for g in spec.G_u[p]]
    total = sum(np.einsum("ri,nij->nrj", G, k.taps) for G, k in zip(spec.G_G, phi_u))
    expected += [worst_case_lhs([1.0], total, spec.noise)]
    np.testing.assert_allclose(rep.lhs, expected, rtol=1e-12)
    np.testing.assert_allclose(rep.slack, rep.lhs - rep.rhs)
    assert rep.feasible() == bool(np.all(rep.slack <= 1e-9 * (1 + np.abs(rep.rhs))))

import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from slsbrd.qp_solver import (BallConstraint, ConicProgram, SocBlock, SolverCache, Status, project_feasible,
                              solve)


def enumerate_active_sets(Q, q, F, f, E=None, e=None):
    """Optimal value of ``min 1/2 x'Qx + q'x, Ex = e, Fx <= f`` by trying every active set."""
    n = Q.shape[0]
    E = np.zeros((0, n)) if E is None else E
    e = np.zeros(0) if e is None else e
    best = np.inf
    x_best = None
    for k in range(F.shape[0] + 1):
        for act in itertools.combinations(range(F.shape[0]), k):
            Aa = np.vstack([E, F[list(act)]])
            ba = np.concatenate([e, f[list(act)]])
            m = Aa.shape[0]
            K = np.block([[Q, Aa.T], [Aa, np.zeros((m, m))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-q, ba]))
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            if np.linalg.norm(K @ sol - np.concatenate([-q, ba])) > 1e-9:
                continue
            if np.any(F @ x > f + 1e-10) or np.any(lam[E.shape[0]:] < -1e-10):
                continue
            val = 0.5 * x @ Q @ x + q @ x
            if val < best:
                best, x_best = val, x
    return best, x_best


def random_qp(rng, n, m, n_eq=0):
    M = rng.standard_normal((n, n))
    Q = M @ M.T + 0.1 * np.eye(n)
    q = rng.standard_normal(n)
    F = rng.standard_normal((m, n))
    x0 = rng.standard_normal(n)
    f = F @ x0 + rng.uniform(0.0, 1.0, m)
    E = rng.standard_normal((n_eq, n)) if n_eq else None
    e = E @ x0 if n_eq else None
    return Q, q, F, f, E, e


def test_hand_example_scalar():
    res = solve(ConicProgram(Q=[[2.0]], q=[0.0], F=[[-1.0]], f=[-1.0]))
    assert res.status == Status.OPTIMAL
    assert abs(res.x[0] - 1.0) < 1e-9
    assert abs(res.y_ineq[0] - 2.0) < 1e-8


def test_ball_projection_formula():
    c = np.array([3.0, 4.0])
    r = 2.0
    prog = ConicProgram(Q=2 * np.eye(2), q=-2 * c, ball=BallConstraint(sp.identity(2, format="csr"), r))
    res = solve(prog)
    assert res.ok
    np.testing.assert_allclose(res.x, r * c / np.linalg.norm(c), atol=1e-9)
    assert res.ball_multiplier > 1e-6
    inner = solve(ConicProgram(Q=2 * np.eye(2), q=-2 * np.array([0.1, 0.2]),
                               ball=BallConstraint(sp.identity(2, format="csr"), r)))
    np.testing.assert_allclose(inner.x, [0.1, 0.2], atol=1e-9)
    assert inner.ball_multiplier <= 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(2, 8), rng.integers(1, 7)
    Q, q, F, f, E, e = random_qp(rng, n, m, n_eq=int(rng.integers(0, 2)))
    ref, _ = enumerate_active_sets(Q, q, F, f, E, e)
    res = solve(ConicProgram(Q=Q, q=q, F=F, f=f, E=E, e=e))
    assert res.ok
    assert abs(res.objective - ref) <= 1e-7 * max(1.0, abs(ref))


def test_soc_constraint():
    # min ||x - c||^2 with ||x|| <= t, t = 1 via a cone with constant head
    c = np.array([2.0, 0.0])
    A = sp.csr_matrix(np.vstack([[0.0, 0.0], np.eye(2)]))
    prog = ConicProgram(Q=2 * np.eye(2), q=-2 * c, socs=[SocBlock(A, np.array([1.0, 0.0, 0.0]))])
    res = solve(prog)
    assert res.ok
    np.testing.assert_allclose(res.x, [1.0, 0.0], atol=1e-7)


def test_infeasible_detected():
    prog = ConicProgram(Q=np.eye(2), q=np.zeros(2), F=[[1.0, 0.0], [-1.0, 0.0]], f=[-1.0, -1.0])
    res = solve(prog, max_iters=5000)
    assert res.status == Status.INFEASIBLE
    bad_eq = ConicProgram(Q=np.eye(2), q=np.zeros(2), E=[[1.0, 0.0], [1.0, 0.0]], e=[0.0, 1.0])
    assert solve(bad_eq).status == Status.INFEASIBLE


def test_warm_start_and_uniqueness(rng):
    Q, q, F, f, _, _ = random_qp(rng, 6, 5)
    cache = SolverCache()
    prog = ConicProgram(Q=Q, q=q, F=F, f=f)
    cold = solve(prog, cache=cache)
    warm = solve(ConicProgram(Q=prog.Q, q=q, F=prog.F, f=f), warm_start=cold, cache=cache)
    assert warm.ok and warm.iterations == 0
    np.testing.assert_allclose(warm.x, cold.x, atol=1e-7)
    other = solve(ConicProgram(Q=Q, q=q, F=F, f=f), warm_start=None, rho=3.0)
    np.testing.assert_allclose(other.x, cold.x, atol=1e-7)


def test_optimality_under_feasible_perturbations(rng):
    Q, q, F, f, _, _ = random_qp(rng, 5, 4)
    res = solve(ConicProgram(Q=Q, q=q, F=F, f=f))
    obj = res.objective
    hits = 0
    for _ in range(200):
        d = rng.standard_normal(5)
        d *= 1e-4 / np.linalg.norm(d)
        x = res.x + d
        if np.all(F @ x <= f):
            hits += 1
            assert 0.5 * x @ Q @ x + q @ x >= obj - 1e-8
    assert hits > 0


def test_project_feasible():
    F = np.array([[1.0, 1.0]])
    prog = ConicProgram(Q=sp.csr_matrix((2, 2)), q=np.zeros(2), F=F, f=[1.0])
    inside = project_feasible(prog, np.array([0.2, 0.3]))
    np.testing.assert_allclose(inside.x, [0.2, 0.3], atol=1e-9)
    ref = np.array([2.0, 1.0])
    out = project_feasible(prog, ref)
    expected = ref - (F @ ref - 1.0) / (F @ F.T)[0, 0] * F[0]
    np.testing.assert_allclose(out.x, expected, atol=1e-9)
    direct = solve(ConicProgram(Q=2 * np.eye(2), q=-2 * ref, F=F, f=[1.0]))
    np.testing.assert_allclose(out.x, direct.x, atol=1e-9)


def test_bad_dimensions():
    with pytest.raises(ValueError):
        ConicProgram(Q=np.eye(2), q=np.zeros(3))
    with pytest.raises(ValueError):
        ConicProgram(Q=[[1.0, 2.0], [0.0, 1.0]], q=np.zeros(2))

import numpy as np
import pytest

from slsbrd.game_model import GameSpec, NoiseModel


def random_game(rng, n_players=2, nx=3, nus=None, radius=0.9, beta=(0.5, 2.0), cross=False,
                identity_penalty=False, constrained=False):
    """Random game meeting the standing assumptions.

    State penalties occupy the first ``nx`` output rows and each player's own
    input penalty a private block below them, so ``D' C = 0`` holds.  With
    ``cross`` the opponents' inputs also enter a player's input block.  With
    ``identity_penalty`` every ``D^{pp}`` has orthogonal columns of equal norm.
    """
    nus = nus or [1] * n_players
    A = rng.standard_normal((nx, nx))
    rho = np.max(np.abs(np.linalg.eigvals(A)))
    A *= radius / rho if rho > 0 else 1.0
    B = [rng.standard_normal((nx, nu)) for nu in nus]
    nz = nx + sum(nus)
    offs = np.concatenate([[nx], nx + np.cumsum(nus)])
    C, D = [], []
    for p in range(n_players):
        C.append(np.vstack([rng.standard_normal((nx, nx)), np.zeros((sum(nus), nx))]))
        row = []
        for q in range(n_players):
            Dq = np.zeros((nz, nus[q]))
            if q == p:
                if identity_penalty:
                    Q, _ = np.linalg.qr(rng.standard_normal((nus[p], nus[p])))
                    block = np.sqrt(rng.uniform(*beta)) * Q
                else:
                    block = rng.uniform(*beta) * np.eye(nus[p]) + 0.3 * rng.standard_normal((nus[p], nus[p]))
                Dq[offs[p]:offs[p + 1]] = block
            elif cross:
                Dq[offs[p]:offs[p + 1]] = 0.3 * rng.standard_normal((nus[p], nus[q]))
            row.append(Dq)
        D.append(row)
    kwargs = {}
    if constrained:
        kwargs["G_u"] = [rng.standard_normal((2, nu)) for nu in nus]
        kwargs["g_u"] = [rng.uniform(1.0, 2.0, 2) for _ in nus]
        kwargs["noise"] = NoiseModel.infinity_ball(np.eye(nx))
    return GameSpec(A=A, B=B, C=C, D=D, **kwargs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_CRITERIA = range(1, 11)
_ERRORS = set()


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def verdict(request):
    """Record and assert one acceptance criterion; the summary prints every line."""

    def record(number, ok, detail=""):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines[number] = line
        print(line)
        assert ok, line

    return record


def pytest_runtest_logreport(report):
    name = report.nodeid.rpartition("::")[2]
    if name.startswith("test_criterion_") and report.failed:
        _ERRORS.add(int(name.split("_")[2]))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if not lines and not _ERRORS:
        return
    terminalreporter.section("acceptance criteria")
    for n in ACCEPTANCE_CRITERIA:
        if n in lines:
            terminalreporter.write_line(lines[n])
        elif n in _ERRORS:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL  (error before a verdict was recorded)")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: not run")

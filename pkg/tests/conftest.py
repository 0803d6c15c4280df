import numpy as np
import pytest
from hypothesis import settings

from tslod.coeff import make_problem, random_parameters, training_set
from tslod.grid import MeshHierarchy
from tslod.lod import LodDiscretization

# property tests: 20 trials, reproducible
settings.register_profile('tslod', max_examples=20, derandomize=True, deadline=None, print_blob=True)
settings.load_profile('tslod')


@pytest.fixture(scope='session')
def desk():
    """tc1 analog on 8x8 coarse / 64x64 fine elements with k = 2."""
    mesh = MeshHierarchy(8, 64)
    coefficient = make_problem('tc1_analog', mesh)
    return LodDiscretization(mesh, coefficient, k=2, cache_systems=True)


@pytest.fixture(scope='session')
def desk_train(desk):
    return training_set(desk.coefficient, 50)


@pytest.fixture(scope='session')
def desk_validation(desk):
    return random_parameters(desk.coefficient, 5, seed=11)


@pytest.fixture(scope='session')
def desk_stage1(desk, desk_train):
    from tslod.stage1 import train_stage1
    return train_stage1(desk, desk_train, 1e-3, retain=True)


@pytest.fixture(scope='session')
def desk_rho(desk, desk_train):
    return desk.rho(desk_train)


@pytest.fixture(scope='session')
def desk_stage2(desk_stage1, desk_train, desk_rho):
    from tslod.stage2 import train_two_scale_rom
    return train_two_scale_rom(desk_stage1, desk_train, 1e-2, desk_rho)


@pytest.fixture(scope='session')
def tiny():
    """Constant coefficient on 4x4 / 16x16 elements."""
    mesh = MeshHierarchy(4, 16)
    return LodDiscretization(mesh, make_problem('constant', mesh), k=1, cache_systems=True)


@pytest.fixture(scope='session')
def tiny_tb():
    """Four-block thermal problem on 4x4 / 16x16 elements, k = 1."""
    mesh = MeshHierarchy(4, 16)
    return LodDiscretization(mesh, make_problem('thermal_block', mesh), k=1, cache_systems=True)


def rel(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300)


# ---------------------------------------------------------------- acceptance verdicts

_verdicts = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one pass/fail line per criterion; lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_verdicts, [])

    def record(n, ok, detail):
        lines.append(f'criterion {n}: {"PASS" if ok else "FAIL"}  {detail}')
        print(lines[-1])
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_verdicts, [])
    if lines:
        terminalreporter.section('acceptance criteria')
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(':'))):
            terminalreporter.write_line(line)

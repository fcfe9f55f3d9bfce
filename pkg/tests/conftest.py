import numpy as np
import pytest

from contourreg import _kernels
from contourreg.geometry import RigidPose, euler_to_pose
from contourreg.synth import NoiseSpec, PhantomSpec, build_phantom, generate_scene

BACKENDS = [_kernels.numpy_impl] + ([_kernels.numba_impl] if _kernels.numba_impl is not None else [])


@pytest.fixture(params=BACKENDS, ids=lambda b: b.name)
def impl(request):
    return request.param


@pytest.fixture(scope="session")
def phantom():
    return build_phantom(PhantomSpec())


@pytest.fixture(scope="session")
def clean_scene(phantom):
    return generate_scene(phantom)


@pytest.fixture(scope="session")
def noisy_scene(phantom):
    return generate_scene(phantom, noise=NoiseSpec(0.5, seed=1))


def random_pose(rng, trans=50.0) -> RigidPose:
    phi, theta, psi = rng.uniform(-180, 180, 3)
    return euler_to_pose(phi, theta * 0.5, psi, rng.uniform(-trans, trans, 3))


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

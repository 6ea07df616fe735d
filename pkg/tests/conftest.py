import numpy as np
import pytest

from qpat.acoustic import DetectorGeometry, WaveOperator
from qpat.experiment import build_illuminations
from qpat.forward import ForwardModel
from qpat.grid import build_angles, build_mesh
from qpat.rte import ParameterPair, TransportDiscretization
from qpat.scattering import build_kernel


@pytest.fixture(scope="session")
def tiny():
    """Coarse mesh, 8 directions, 16 detectors: fast enough for gradient checks."""
    mesh = build_mesh(2 / 8)
    angles = build_angles(8)
    kernel = build_kernel(angles, 0.5)
    disc = TransportDiscretization(mesh, angles, kernel)
    geometry = DetectorGeometry(R=1.8, n_det=16, dt=0.1, t_max=4.0)
    wave = WaveOperator(mesh, geometry)
    model = ForwardModel(disc, wave, build_illuminations(("top", "left"), mesh, angles, geometry))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_mu(n, rng, lo_a=0.2, hi_a=1.5, lo_s=1.0, hi_s=4.0):
    return ParameterPair(rng.uniform(lo_a, hi_a, n), rng.uniform(lo_s, hi_s, n))


@pytest.fixture(scope="session")
def tiny_problem(tiny):
    """Desk phantom on the coarse mesh with matched (noise-free) data."""
    from qpat.experiment import build_phantom
    from qpat.optim_standard import InverseProblem
    from qpat.regularizers import FeasibleSet, laplacian_regularizer

    mesh = tiny.disc.mesh
    truth = build_phantom(mesh).params
    data = [tiny.forward(truth, i).copy() for i in range(tiny.n_illuminations)]
    feasible = FeasibleSet.with_boundary(mesh, truth.mu_a, truth.mu_s)
    return InverseProblem(tiny, data, laplacian_regularizer(mesh), feasible, truth, [1e-12] * len(data))


# -- acceptance summary ------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one measured part of an acceptance criterion: ``criterion(n, passed, detail)``."""

    def record(n, passed, detail):
        ACCEPTANCE.setdefault(n, []).append((bool(passed), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        verdict = "PASS" if all(p for p, _ in parts) else "FAIL"
        tr.write_line(f"criterion {n}: {verdict}  " + "; ".join(f"{d} [{'ok' if p else 'FAIL'}]" for p, d in parts))

"""Synthetic phantom, illumination protocol, data simulation and scenario runs.

Data are simulated on a finer spatial and angular grid than the one used
for reconstruction, so the reconstruction never sees its own discretization
error in the data.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field, replace
import logging
import time

import numpy as np

from .acoustic import DetectorGeometry, WaveOperator
from .forward import ForwardModel, Illumination
from .grid import SIDE_NORMALS, SIDES, AngularGrid, SpatialMesh, build_angles, build_mesh
from .mull import MullConfig, PenaltyWeights, init_state, mull_projected_sgd, mull_proximal_sgd
from .optim_standard import (
    InverseProblem,
    OptimConfig,
    loping_landweber_kaczmarz,
    projected_landweber,
    proximal_gradient,
    proximal_stochastic_gradient,
)
from .regularizers import FeasibleSet, laplacian_regularizer
from .rte import ParameterPair, SourcePair, TransportDiscretization
from .scattering import build_kernel
from .trace import IterateTrace, relative_error

log = logging.getLogger(__name__)

ALGORITHMS = ("pg", "prox-sgd", "landweber", "llk", "mull-proj", "mull-prox")

BACKGROUND_MU_A = 0.3
DISK_MU_A = 1.0
STRIPE_MU_A = 2.0
GAP_MU_A = 0.5
MU_S = 3.0


@dataclass(frozen=True)
class Phantom:
    """Nodal coefficients of the test object together with its geometry.

    Two disks (``disk_centers``, ``disk_radius``) and three horizontal
    stripes given as ``(x0, x1, y0, y1)`` rectangles; the two gaps between
    neighbouring stripes have their own absorption.
    """

    mu_a: np.ndarray
    mu_s: np.ndarray
    disk_centers: tuple = ((-0.45, -0.35), (0.45, -0.35))
    disk_radius: float = 0.25
    stripes: tuple = ()
    gaps: tuple = ()

    @property
    def params(self) -> ParameterPair:
        return ParameterPair(self.mu_a.copy(), self.mu_s.copy())


def _stripe_layout(center=0.45, width=0.12, pitch=0.24, x_range=(-0.7, 0.7)):
    x0, x1 = x_range
    ys = (center - pitch, center, center + pitch)
    stripes = tuple((x0, x1, y - width / 2, y + width / 2) for y in ys)
    gaps = tuple((x0, x1, a[3], b[2]) for a, b in zip(stripes[:-1], stripes[1:]))
    return stripes, gaps


def build_phantom(mesh: SpatialMesh) -> Phantom:
    """Rasterize the phantom at the mesh nodes (points on an edge count as inside)."""
    stripes, gaps = _stripe_layout()
    centers = ((-0.45, -0.35), (0.45, -0.35))
    radius = 0.25
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    eps = 1e-12
    mu_a = np.full(mesh.n_nodes, BACKGROUND_MU_A)

    def rect(r):
        return (x >= r[0] - eps) & (x <= r[1] + eps) & (y >= r[2] - eps) & (y <= r[3] + eps)

    for g in gaps:
        mu_a[rect(g)] = GAP_MU_A
    for s in stripes:
        mu_a[rect(s)] = STRIPE_MU_A
    for cx, cy in centers:
        mu_a[(x - cx) ** 2 + (y - cy) ** 2 <= radius**2 + eps] = DISK_MU_A
    mu_s = np.full(mesh.n_nodes, MU_S)
    return Phantom(mu_a, mu_s, centers, radius, stripes, gaps)


def build_illuminations(sides, mesh: SpatialMesh, angles: AngularGrid, geometry: DetectorGeometry, horizon: float | None = None) -> list[Illumination]:
    """One collimated boundary source per side, paired with the facing detector arc.

    The beam direction is the inward normal snapped to the nearest grid
    direction; its boundary value is ``1 / w_j`` on that direction only, so
    the injected angular mass does not depend on ``n_theta``.
    """
    sides = list(sides)
    if not sides:
        raise ValueError("need at least one illumination side")
    bad = [s for s in sides if s not in SIDES]
    if bad:
        raise ValueError(f"unknown sides {bad}; choose from {SIDES}")
    T = geometry.t_max if horizon is None else horizon
    out = []
    for k, side in enumerate(sides):
        s = SIDES.index(side)
        j = angles.nearest(-SIDE_NORMALS[s])
        q_o = np.zeros((mesh.n_nodes, angles.n_theta))
        q_o[mesh.side_tags[:, s], j] = 1.0 / angles.weight
        out.append(Illumination(k, side, SourcePair(q_o=q_o), geometry.arcs[side], T, geometry.mask(side, T)))
    return out


@dataclass
class Scenario:
    """Everything that defines one synthetic experiment.

    ``dt = None`` sets the time step to half the reconstruction mesh size.
    ``algorithm`` is one of :data:`ALGORITHMS`; ``optim`` and ``mull`` hold
    the settings of the standard and the multilinear methods.
    """

    sides: tuple = SIDES
    h_data: float = 2 / 50
    n_theta_data: int = 32
    h_rec: float = 2 / 40
    n_theta_rec: int = 16
    g: float = 0.5
    R: float = 1.8
    n_det: int = 128
    t_max: float = 4.0
    dt: float | None = None
    noise_level: float = 0.0
    noise_seed: int = 0
    bounds: tuple = (3.0, 6.0)
    algorithm: str = "pg"
    optim: OptimConfig = field(default_factory=OptimConfig)
    mull: MullConfig = field(default_factory=MullConfig)
    weights: PenaltyWeights = field(default_factory=PenaltyWeights)
    warm_start: bool = True

    def __post_init__(self):
        if not self.h_data < self.h_rec:
            raise ValueError(f"data grid h={self.h_data} must be finer than reconstruction grid h={self.h_rec}")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")

    def geometry(self) -> DetectorGeometry:
        dt = self.h_rec / 2 if self.dt is None else self.dt
        return DetectorGeometry(R=self.R, n_det=self.n_det, dt=dt, t_max=self.t_max)


def build_model(h: float, n_theta: int, scenario: Scenario) -> ForwardModel:
    mesh = build_mesh(h)
    angles = build_angles(n_theta)
    disc = TransportDiscretization(mesh, angles, build_kernel(angles, scenario.g))
    geometry = scenario.geometry()
    wave = WaveOperator(mesh, geometry)
    return ForwardModel(disc, wave, build_illuminations(scenario.sides, mesh, angles, geometry))


def simulate_data(phantom_builder, scenario: Scenario, model: ForwardModel | None = None) -> list[np.ndarray]:
    """Noise-free data ``v_i = U_i H_i(mu)`` on the data grid.

    ``phantom_builder`` maps a mesh to a :class:`Phantom` (normally
    :func:`build_phantom`).
    """
    model = model or build_model(scenario.h_data, scenario.n_theta_data, scenario)
    mu = phantom_builder(model.disc.mesh).params
    mu.bounds = tuple(scenario.bounds)
    return [model.forward(mu, i) for i in range(model.n_illuminations)]


def noise_sigma(data, level: float) -> float:
    return level * max(float(np.max(np.abs(v))) for v in data)


def add_noise(data, level: float, seed: int, masks=None) -> list[np.ndarray]:
    """Add white Gaussian noise with ``sigma = level * max |v|`` over all data sets.

    Only measured samples (``masks``, if given) receive noise.
    """
    if level < 0:
        raise ValueError("noise level must be non-negative")
    data = [np.asarray(v, float) for v in data]
    if level == 0:
        return [v.copy() for v in data]
    sigma = noise_sigma(data, level)
    rng = np.random.default_rng(seed)
    out = []
    for k, v in enumerate(data):
        z = sigma * rng.standard_normal(v.shape)
        if masks is not None:
            z = np.where(masks[k], z, 0.0)
        out.append(v + z)
    return out


def noise_deltas(model: ForwardModel, sigma: float) -> list[float]:
    """Expected Y norm of the noise on each illumination's measured set."""
    yw = model.wave.geometry.y_weights()
    return [sigma * float(np.sqrt(np.sum(yw[il.mask]))) for il in model.illuminations]


def initial_guess(mesh: SpatialMesh, bounds=(3.0, 6.0)) -> ParameterPair:
    """Constant coefficients equal to the known boundary values."""
    return ParameterPair(np.full(mesh.n_nodes, BACKGROUND_MU_A), np.full(mesh.n_nodes, MU_S), tuple(bounds))


def build_problem(model: ForwardModel, data, scenario: Scenario, deltas=None) -> InverseProblem:
    mesh = model.disc.mesh
    truth = build_phantom(mesh).params
    truth.bounds = tuple(scenario.bounds)
    feasible = FeasibleSet.with_boundary(mesh, truth.mu_a, truth.mu_s, scenario.bounds)
    return InverseProblem(model, list(data), laplacian_regularizer(mesh), feasible, truth, deltas)


@dataclass
class RunResult:
    mu: ParameterPair
    trace: IterateTrace
    initial_error: float
    final_error: float
    timings: dict
    counts: dict
    data: list = field(repr=False, default_factory=list)


def reconstruct(problem: InverseProblem, scenario: Scenario, mu0: ParameterPair | None = None):
    """Run ``scenario.algorithm`` on an assembled problem; returns ``(mu, trace)``."""
    mu0 = mu0 or initial_guess(problem.model.disc.mesh, scenario.bounds)
    alg = scenario.algorithm
    if alg in ("pg", "prox-sgd", "landweber", "llk"):
        fn = {
            "pg": proximal_gradient,
            "prox-sgd": proximal_stochastic_gradient,
            "landweber": projected_landweber,
            "llk": loping_landweber_kaczmarz,
        }[alg]
        return fn(problem, mu0, scenario.optim)
    z0 = init_state(problem, mu0, warm=scenario.warm_start)
    fn = mull_proximal_sgd if alg == "mull-prox" else mull_projected_sgd
    z, trace = fn(problem, z0, scenario.weights, scenario.mull)
    return z.mu, trace


class StageError(RuntimeError):
    """An error raised inside one stage of a scenario run, labelled with the stage."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class SimulatedData:
    """Noisy data on the detector grid and the noise standard deviation used."""

    data: list
    sigma: float
    clean: list = field(repr=False, default_factory=list)


def simulate(scenario: Scenario, phantom_builder=build_phantom) -> SimulatedData:
    """Fine-grid simulation followed by seeded noise on the measured samples."""
    with _stage("simulate"):
        model = build_model(scenario.h_data, scenario.n_theta_data, scenario)
        clean = simulate_data(phantom_builder, scenario, model)
        masks = [il.mask for il in model.illuminations]
        noisy = add_noise(clean, scenario.noise_level, scenario.noise_seed, masks)
    return SimulatedData(noisy, noise_sigma(clean, scenario.noise_level), clean)


def solve(scenario: Scenario, data, sigma: float = 0.0, checkpoint=None) -> RunResult:
    """Reconstruct from given (possibly noisy) data on the reconstruction grid.

    ``sigma`` is the noise standard deviation; it sets the per-illumination
    noise levels used by the discrepancy rules. Noise-free data get a tiny
    positive level so the loping rule never skips.
    """
    timings = {}
    t0 = time.perf_counter()
    with _stage("setup"):
        model = build_model(scenario.h_rec, scenario.n_theta_rec, scenario)
        deltas = noise_deltas(model, sigma) if sigma > 0 else [1e-12 * model.y_norm(v) for v in data]
        problem = build_problem(model, data, scenario, deltas)
        mu0 = initial_guess(model.disc.mesh, scenario.bounds)
        if checkpoint is not None:
            scenario = replace(
                scenario,
                optim=replace(scenario.optim, checkpoint=checkpoint),
                mull=replace(scenario.mull, checkpoint=checkpoint),
            )
    timings["setup_s"] = time.perf_counter() - t0

    model.counts.clear()
    t0 = time.perf_counter()
    with _stage("reconstruct"):
        mu, trace = reconstruct(problem, scenario, mu0)
    timings["reconstruct_s"] = time.perf_counter() - t0
    m = model.mass
    return RunResult(
        mu=mu,
        trace=trace,
        initial_error=relative_error(mu0.mu_a, problem.truth.mu_a, m),
        final_error=relative_error(mu.mu_a, problem.truth.mu_a, m),
        timings=timings,
        counts=dict(model.counts),
        data=list(data),
    )


def run_scenario(scenario: Scenario, data=None) -> RunResult:
    """Simulate (unless noise-free ``data`` is given), add noise, and reconstruct."""
    t0 = time.perf_counter()
    if data is None:
        sim = simulate(scenario)
    else:
        with _stage("simulate"):
            geometry = scenario.geometry()
            masks = [geometry.mask(side) for side in scenario.sides]
            noisy = add_noise(data, scenario.noise_level, scenario.noise_seed, masks)
            sim = SimulatedData(noisy, noise_sigma(data, scenario.noise_level), list(data))
    elapsed = time.perf_counter() - t0
    result = solve(scenario, sim.data, sim.sigma)
    result.timings["simulate_s"] = elapsed
    return result


def with_algorithm(scenario: Scenario, algorithm: str, **changes) -> Scenario:
    return replace(scenario, algorithm=algorithm, **changes)

"""Invariant suites behind ``qpat verify``.

Each suite builds small operators, measures one quantity per invariant and
compares it with a fixed tolerance. Results are plain records so the CLI
can print them as JSON.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import time

import numpy as np
import scipy.sparse as sp
from scipy.optimize import lsq_linear

from .acoustic import DetectorGeometry, WaveOperator, y_inner
from .experiment import Scenario, build_model, build_phantom, initial_guess
from .grid import build_mesh
from .mull import MullGradient, MullProblem, MullState
from .optim_standard import (
    InverseProblem,
    OptimConfig,
    projected_landweber,
    proximal_gradient,
    proximal_stochastic_gradient,
)
from .regularizers import FeasibleSet, RegOperator, dykstra, laplacian_regularizer
from .rte import ParameterPair

SUITES = ("adjoints", "isometry", "gradients", "dykstra", "degeneracy")


@dataclass
class Check:
    suite: str
    name: str
    value: float
    tol: float
    passed: bool
    seconds: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _check(suite, name, value, tol, t0) -> Check:
    value = float(value)
    return Check(suite, name, value, tol, bool(np.isfinite(value) and value <= tol), time.perf_counter() - t0)


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def tiny_model(sides=("top", "left")):
    """Coarse reconstruction model (h = 2/8, 8 directions, 16 detectors)."""
    sc = Scenario(sides=tuple(sides), h_data=2 / 16, h_rec=2 / 8, n_theta_rec=8, n_det=16, dt=0.1)
    return build_model(sc.h_rec, sc.n_theta_rec, sc)


def tiny_problem(model=None) -> InverseProblem:
    model = model or tiny_model()
    mesh = model.disc.mesh
    truth = build_phantom(mesh).params
    data = [model.forward(truth, i).copy() for i in range(model.n_illuminations)]
    feasible = FeasibleSet.with_boundary(mesh, truth.mu_a, truth.mu_s)
    return InverseProblem(model, data, laplacian_regularizer(mesh), feasible, truth, [1e-12] * len(data))


def _random_mu(n, rng):
    return ParameterPair(rng.uniform(0.2, 1.5, n), rng.uniform(1.0, 4.0, n))


def suite_adjoints(seed: int = 0, trials: int = 5, model=None, solve_tol: float = 1e-12) -> list[Check]:
    """Adjoint identities on ``trials`` random triples (default: the tiny model)."""
    rng = np.random.default_rng(seed)
    model = model or tiny_model()
    disc, wave = model.disc, model.wave
    n, nt = disc.n_nodes, disc.n_theta
    out = []
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        mu = _random_mu(n, rng)
        u, w = rng.standard_normal((2, n, nt))
        worst = max(worst, _rel(np.sum(disc.apply(mu.mu_a, mu.mu_s, u) * w), np.sum(u * disc.apply_transpose(mu.mu_a, mu.mu_s, w))))
    out.append(_check("adjoints", "transport M vs M^T", worst, 1e-12, t0))
    t0 = time.perf_counter()
    worst = 0.0
    g = wave.geometry
    for _ in range(trials):
        p0 = rng.standard_normal(n)
        v = rng.standard_normal(g.shape)
        worst = max(worst, _rel(y_inner(wave.forward(p0), v, g), float(np.sum(wave.mass * p0 * wave.adjoint(v)))))
    out.append(_check("adjoints", "wave U vs U*", worst, 1e-12, t0))
    t0 = time.perf_counter()
    worst = 0.0
    model.tol = solve_tol
    for k in range(trials):
        mu = _random_mu(n, rng)
        i = k % model.n_illuminations
        h_a, h_s = rng.standard_normal((2, n))
        v = rng.standard_normal(g.shape)
        lhs = y_inner(model.derivative_apply(mu, h_a, h_s, i), v, g)
        ga, gs = model.adjoint_apply(mu, v, i)
        worst = max(worst, _rel(lhs, float(np.sum(model.mass * (ga * h_a + gs * h_s)))))
    out.append(_check("adjoints", "forward derivative F' vs F'*", worst, 1e-6, t0))
    return out


def suite_isometry(cells: int = 80) -> list[Check]:
    t0 = time.perf_counter()
    mesh = build_mesh(2 / cells)
    geometry = DetectorGeometry(dt=mesh.h / 2)
    op = WaveOperator(mesh, geometry)
    x, y = mesh.nodes.T
    s = np.minimum(1.0, ((x - 0.2) ** 2 + (y + 0.1) ** 2) / 0.25)
    p0 = np.where(s < 1, np.cos(np.pi / 2 * s) ** 2, 0.0)
    v = op.forward(p0)
    ratio = y_inner(v, v, geometry) / float(np.sum(op.mass * p0**2)) / (geometry.R / 2)
    return [_check("isometry", f"|Up0|^2 / |p0|^2 / (R/2) - 1 at h=2/{cells} (ratio {ratio:.4f})", abs(ratio - 1), 0.02, t0)]


def _mull_fd(mp: MullProblem, problem, rng, points: int) -> float:
    n, nt = mp.disc.n_nodes, mp.disc.n_theta
    worst = 0.0
    for _ in range(points):
        z = MullState(_random_mu(n, rng), [rng.uniform(0, 2, (n, nt)) for _ in range(problem.n)], [rng.uniform(0, 1, n) for _ in range(problem.n)])
        i = int(rng.integers(problem.n))
        for l in (1, 2, 3, 4):
            g = mp.grad_J(l, i, z)
            d = MullGradient(i, rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal((n, nt)), rng.standard_normal(n))

            def moved(t):
                y = z.copy()
                mp.step(y, d, t)
                return mp.eval_J(l, i, y)

            eps = 1e-4
            fd = (moved(-eps) - moved(eps)) / (2 * eps)
            an = 0.0
            for a, b in ((g.mu_a, d.mu_a), (g.mu_s, d.mu_s), (g.H, d.H)):
                if a is not None:
                    an += float(np.sum(mp.mass * a * b))
            if g.phi is not None:
                an += float(np.sum(mp.mass[:, None] * mp.disc.w * g.phi * d.phi))
            worst = max(worst, _rel(an, fd))
    return worst


def suite_gradients(seed: int = 0, points: int = 10) -> list[Check]:
    rng = np.random.default_rng(seed)
    model = tiny_model()
    model.tol = 1e-12
    problem = tiny_problem(model)
    t0 = time.perf_counter()
    mp = MullProblem(problem, estimate_mu_s=True)
    out = [_check("gradients", "multilinear misfit gradients vs central differences", _mull_fd(mp, problem, rng, points), 1e-5, t0)]
    t0 = time.perf_counter()
    worst = 0.0
    n = model.disc.n_nodes
    for k in range(points):
        mu = _random_mu(n, rng)
        i = k % problem.n
        data = problem.data[i] * rng.uniform(0.5, 1.5)
        ga, gs, _ = model.grad_fidelity(mu, i, data)
        h_a, h_s = rng.standard_normal((2, n))
        eps = 1e-5
        plus = ParameterPair(mu.mu_a + eps * h_a, mu.mu_s + eps * h_s)
        minus = ParameterPair(mu.mu_a - eps * h_a, mu.mu_s - eps * h_s)
        fd = (model.fidelity(plus, i, data) - model.fidelity(minus, i, data)) / (2 * eps)
        worst = max(worst, _rel(float(np.sum(model.mass * (ga * h_a + gs * h_s))), fd))
    out.append(_check("gradients", "fidelity gradient vs central differences", worst, 1e-4, t0))
    return out


def _second_difference(n: int, h: float) -> sp.csr_matrix:
    rows = np.arange(n - 2)
    vals = np.concatenate([np.full(n - 2, -2.0), np.ones(2 * (n - 2))]) / h**2
    return sp.coo_matrix((vals, (np.tile(rows, 3), np.concatenate([rows + 1, rows, rows + 2]))), shape=(n - 2, n)).tocsr()


def _bvls(x, c, L, mass, z, lo, hi, fixed, vals):
    free = np.setdiff1d(np.arange(x.size), fixed)
    Ld = L.toarray()
    sm, sc = np.sqrt(mass[free]), np.sqrt(c * z)
    A = np.vstack([np.diag(sm), sc * Ld[:, free]])
    b = np.concatenate([sm * x[free], -sc * Ld[:, fixed] @ vals])
    y = np.empty_like(x)
    y[free] = lsq_linear(A, b, bounds=(lo, hi), method="bvls", tol=1e-14).x
    y[fixed] = vals
    return y


def suite_dykstra(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    t0 = time.perf_counter()
    h = 0.25
    L = _second_difference(7, h)
    reg = RegOperator(L, (100 * L).tocsr(), np.full(7, h), h)
    fixed = np.array([0, 6])
    D = FeasibleSet(upper=(3.0, 6.0), fixed_nodes=fixed, fixed_a=np.array([0.5, 2.5]), fixed_s=np.array([1.0, 5.0]))
    worst = 0.0
    for c in (1e-3, 1e-1, 1.0):
        xa, xs = rng.uniform(-1, 4, 7), rng.uniform(-2, 8, 7)
        res = dykstra(xa, xs, c, reg, D, max_iter=1000, tol=1e-10)
        ra = _bvls(xa, c, reg.L_a, reg.mass, h, 0, 3, fixed, D.fixed_a)
        rs = _bvls(xs, c, reg.L_s, reg.mass, h, 0, 6, fixed, D.fixed_s)
        worst = max(worst, np.sqrt(np.sum(reg.mass * ((res.mu_a - ra) ** 2 + (res.mu_s - rs) ** 2))))
    out.append(_check("dykstra", "1-D, 7 nodes: L2 distance to bounded least squares", worst, 1e-6, t0))
    t0 = time.perf_counter()
    mesh = build_mesh(2 / 6)
    reg = laplacian_regularizer(mesh)
    ta, ts = rng.uniform(0.2, 1.0, 49), rng.uniform(1.0, 4.0, 49)
    D = FeasibleSet.with_boundary(mesh, ta, ts, upper=(1.0, 4.0))
    xa, xs = rng.uniform(-0.5, 1.5, 49), rng.uniform(0.0, 5.0, 49)
    c = 5e-3
    res = dykstra(xa, xs, c, reg, D, max_iter=1000, tol=1e-10)
    b = mesh.boundary_nodes
    ra = _bvls(xa, c, reg.L_a, reg.mass, reg.z_weight, 0, 1, b, ta[b])
    rs = _bvls(xs, c, reg.L_s, reg.mass, reg.z_weight, 0, 4, b, ts[b])
    dist = np.sqrt(np.sum(reg.mass * ((res.mu_a - ra) ** 2 + (res.mu_s - rs) ** 2)))
    out.append(_check("dykstra", "2-D, 49 nodes: L2 distance to bounded least squares", dist, 1e-6, t0))
    return out


def _trajectory_gap(ta, tb) -> float:
    gap = 0.0
    for col in ("objective", "rel_err_mu_a"):
        a, b = ta.column(col)[1:], tb.column(col)[1:]
        gap = max(gap, float(np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-300))))
    return gap


def suite_degeneracy(iterations: int = 5) -> list[Check]:
    problem = tiny_problem()
    mu0 = initial_guess(problem.model.disc.mesh)
    out = []
    t0 = time.perf_counter()
    _, ta = proximal_gradient(problem, mu0, OptimConfig(max_iter=iterations))
    _, tb = proximal_stochastic_gradient(problem, mu0, OptimConfig(max_iter=iterations, batch_size=problem.n))
    out.append(_check("degeneracy", "stochastic prox-gradient with full batch vs prox-gradient", _trajectory_gap(ta, tb), 1e-12, t0))
    t0 = time.perf_counter()
    _, ta = proximal_gradient(problem, mu0, OptimConfig(lam=0.0, max_iter=iterations))
    _, tb = projected_landweber(problem, mu0, OptimConfig(lam=0.0, max_iter=iterations), stop_on_discrepancy=False)
    out.append(_check("degeneracy", "prox-gradient at lam=0 vs projected Landweber", _trajectory_gap(ta, tb), 1e-12, t0))
    return out


_RUNNERS = {
    "adjoints": suite_adjoints,
    "isometry": suite_isometry,
    "gradients": suite_gradients,
    "dykstra": suite_dykstra,
    "degeneracy": suite_degeneracy,
}


def run_suite(name: str) -> list[Check]:
    """Run one suite by name, or every suite for ``"all"``."""
    if name == "all":
        return [c for s in SUITES for c in _RUNNERS[s]()]
    if name not in _RUNNERS:
        raise KeyError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")
    return _RUNNERS[name]()

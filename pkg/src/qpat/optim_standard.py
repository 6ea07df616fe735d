"""Gradient-type reconstruction with full transport solves in every step.

All four methods work on the stacked problem ``F_i(mu) = v_i`` and use the
fidelity gradients of :class:`~qpat.forward.ForwardModel`. Gradients are
averaged over the illuminations used in a step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
import time
from typing import Callable

import numpy as np

from .forward import ForwardModel
from .regularizers import FeasibleSet, RegOperator, dykstra
from .rte import ParameterPair
from .trace import IterateTrace, relative_error, solve_counts

log = logging.getLogger(__name__)


@dataclass
class InverseProblem:
    """Data, forward model and constraints of one reconstruction.

    ``deltas[i]`` is the noise level of ``data[i]`` in the Y norm (needed by
    the discrepancy-based stopping rules). ``truth`` only feeds the error
    columns of the trace.
    """

    model: ForwardModel
    data: list
    reg: RegOperator
    feasible: FeasibleSet
    truth: ParameterPair | None = None
    deltas: list | None = None

    def __post_init__(self):
        if len(self.data) != self.model.n_illuminations:
            raise ValueError(f"got {len(self.data)} data sets for {self.model.n_illuminations} illuminations")
        for i, v in enumerate(self.data):
            if np.shape(v) != self.model.wave.geometry.shape:
                raise ValueError(f"data set {i} has shape {np.shape(v)}, expected {self.model.wave.geometry.shape}")

    @property
    def n(self) -> int:
        return len(self.data)

    def penalty(self, mu: ParameterPair) -> float:
        return self.reg.value(mu.mu_a, mu.mu_s)

    def errors(self, mu: ParameterPair) -> tuple[float, float]:
        if self.truth is None:
            return float("nan"), float("nan")
        m = self.model.mass
        return relative_error(mu.mu_a, self.truth.mu_a, m), relative_error(mu.mu_s, self.truth.mu_s, m)


@dataclass
class OptimConfig:
    """Settings of the standard algorithms.

    ``step_schedule`` is ``"constant"`` (``s_k = step``) or ``"inv_sqrt"``
    (``s_k = step / sqrt(k + 1)``). With ``estimate_mu_s`` false the
    scattering coefficient stays at its initial value.
    """

    lam: float = 2e-8
    step: float = 0.5
    step_schedule: str = "constant"
    max_iter: int = 10
    batch_size: int = 1
    seed: int = 0
    tau: float = 1.5
    estimate_mu_s: bool = False
    dykstra_max_iter: int = 50
    dykstra_tol: float = 1e-8
    checkpoint: Callable | None = field(default=None, repr=False)
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.step_schedule not in ("constant", "inv_sqrt"):
            raise ValueError(f"unknown step schedule {self.step_schedule!r}")
        if self.step <= 0 or self.lam < 0 or self.max_iter < 0 or self.tau <= 1:
            raise ValueError("need step > 0, lam >= 0, max_iter >= 0 and tau > 1")

    def step_at(self, k: int) -> float:
        return self.step if self.step_schedule == "constant" else self.step / math.sqrt(k + 1)


class _Recorder:
    def __init__(self, problem: InverseProblem, config: OptimConfig):
        self.problem = problem
        self.config = config
        self.trace = IterateTrace()
        self.t0 = time.perf_counter()

    def row(self, k, mu, picked="", picked_l="", fidelity=float("nan")):
        pen = self.config.lam * self.problem.penalty(mu)
        ea, es = self.problem.errors(mu)
        self.trace.append(
            iter=k,
            picked_i=picked,
            picked_l=picked_l,
            objective=fidelity + pen,
            fidelity=fidelity,
            penalty=pen,
            rel_err_mu_a=ea,
            rel_err_mu_s=es,
            wall_s=time.perf_counter() - self.t0,
            **solve_counts(self.problem.model.counts),
        )
        cfg = self.config
        if cfg.checkpoint is not None and cfg.checkpoint_every and k > 0 and k % cfg.checkpoint_every == 0:
            cfg.checkpoint(k, mu, self.trace)


def _check_start(problem: InverseProblem, mu0: ParameterPair) -> ParameterPair:
    if mu0.mu_a.shape != (problem.model.disc.n_nodes,):
        raise ValueError("initial coefficients do not match the reconstruction mesh")
    if not mu0.is_feasible():
        raise ValueError("initial coefficients are not admissible")
    return mu0.copy()


def _averaged_step(problem, mu, indices, step, estimate_mu_s):
    ga, gs, fid = problem.model.grad_fidelity_sum(mu, indices, problem.data)
    c = step / len(indices)
    xa = mu.mu_a - c * ga
    xs = mu.mu_s - c * gs if estimate_mu_s else mu.mu_s.copy()
    return xa, xs, fid / len(indices)


def _prox(problem, config, xa, xs, step, bounds):
    res = dykstra(xa, xs, step * config.lam, problem.reg, problem.feasible, config.dykstra_max_iter, config.dykstra_tol)
    if not res.converged:
        log.warning("Dykstra stopped after %d cycles without reaching tolerance", res.iterations)
    return ParameterPair(res.mu_a, res.mu_s, bounds)


def _stochastic(problem: InverseProblem, mu0: ParameterPair, config: OptimConfig, batch: int) -> tuple[ParameterPair, IterateTrace]:
    mu = _check_start(problem, mu0)
    if not 1 <= batch <= problem.n:
        raise ValueError(f"batch size must be in [1, {problem.n}], got {batch}")
    rng = np.random.default_rng(config.seed)
    rec = _Recorder(problem, config)
    rec.row(0, mu)
    for k in range(config.max_iter):
        if batch == problem.n:
            idx = list(range(problem.n))
        else:
            idx = sorted(int(i) for i in rng.choice(problem.n, size=batch, replace=False))
        s = config.step_at(k)
        xa, xs, fid = _averaged_step(problem, mu, idx, s, config.estimate_mu_s)
        pen_prev = config.lam * problem.penalty(mu)
        mu = _prox(problem, config, xa, xs, s, mu.bounds)
        rec.row(k + 1, mu, ";".join(map(str, idx)), fidelity=fid)
        # objective columns refer to the iterate the gradient was taken at
        rec.trace.rows[-1]["objective"] = fid + pen_prev
        rec.trace.rows[-1]["penalty"] = pen_prev
    rec.trace.status = "max_iter"
    return mu, rec.trace


def proximal_gradient(problem: InverseProblem, mu0: ParameterPair, config: OptimConfig | None = None):
    """Proximal gradient with the full averaged gradient in every step.

    Returns the final coefficients and the trace. Row ``k`` of the trace
    holds the error of iterate ``k`` and the objective at iterate ``k - 1``.
    """
    return _stochastic(problem, mu0, config or OptimConfig(), problem.n)


def proximal_stochastic_gradient(problem: InverseProblem, mu0: ParameterPair, config: OptimConfig | None = None):
    """Proximal stochastic gradient: each step uses ``config.batch_size`` random illuminations.

    Indices in a step are drawn without replacement and summed in increasing
    order, so ``batch_size = N`` reproduces :func:`proximal_gradient` exactly.
    """
    config = config or OptimConfig()
    return _stochastic(problem, mu0, config, config.batch_size)


def _total_delta(problem: InverseProblem) -> float:
    if problem.deltas is None:
        raise ValueError("discrepancy stopping needs the per-illumination noise levels")
    return math.sqrt(sum(d * d for d in problem.deltas))


def projected_landweber(problem: InverseProblem, mu0: ParameterPair, config: OptimConfig | None = None, stop_on_discrepancy: bool = True):
    """Projected Landweber ``mu <- P_D(mu - s_k mean_i grad F_i)``.

    Stops at the first iterate with ``||v - F(mu)|| <= tau * delta`` when
    noise levels are known, or after ``max_iter`` steps.
    """
    config = config or OptimConfig()
    mu = _check_start(problem, mu0)
    target = config.tau * _total_delta(problem) if (stop_on_discrepancy and problem.deltas is not None) else -1.0
    rec = _Recorder(problem, config)
    rec.row(0, mu)
    idx = list(range(problem.n))
    for k in range(config.max_iter):
        s = config.step_at(k)
        xa, xs, fid = _averaged_step(problem, mu, idx, s, config.estimate_mu_s)
        if math.sqrt(2.0 * fid * problem.n) <= target:
            rec.trace.status = "discrepancy"
            return mu, rec.trace
        pa, ps = problem.feasible.project(xa, xs)
        mu = ParameterPair(pa, ps, mu.bounds)
        rec.row(k + 1, mu, ";".join(map(str, idx)), fidelity=fid)
        rec.trace.rows[-1]["objective"] = fid
        rec.trace.rows[-1]["penalty"] = 0.0
    rec.trace.status = "max_iter"
    return mu, rec.trace


def loping_landweber_kaczmarz(problem: InverseProblem, mu0: ParameterPair, config: OptimConfig | None = None):
    """Cyclic Kaczmarz sweeps that skip equations already fitted to noise level.

    Step ``k`` uses ``i = k mod N``. If ``||F_i(mu) - v_i|| < tau delta_i``
    the step is skipped (no adjoint solve). The iteration ends once a whole
    cycle is skipped at the same iterate.
    """
    config = config or OptimConfig()
    mu = _check_start(problem, mu0)
    if problem.deltas is None:
        raise ValueError("the loping rule needs the per-illumination noise levels")
    model = problem.model
    rec = _Recorder(problem, config)
    rec.row(0, mu)
    skipped = 0
    for k in range(config.max_iter):
        i = k % problem.n
        r = model.residual(mu, i, problem.data[i])
        norm = model.y_norm(r)
        fid = 0.5 * norm * norm
        if norm < config.tau * problem.deltas[i]:
            skipped += 1
            rec.row(k + 1, mu, str(i), picked_l="skip", fidelity=fid)
            if skipped >= problem.n:
                rec.trace.status = "discrepancy"
                return mu, rec.trace
            continue
        skipped = 0
        s = config.step_at(k)
        ga, gs = model.adjoint_apply(mu, r, i)
        xa = mu.mu_a - s * ga
        xs = mu.mu_s - s * gs if config.estimate_mu_s else mu.mu_s.copy()
        pa, ps = problem.feasible.project(xa, xs)
        mu = ParameterPair(pa, ps, mu.bounds)
        rec.row(k + 1, mu, str(i), fidelity=fid)
    rec.trace.status = "max_iter"
    return mu, rec.trace

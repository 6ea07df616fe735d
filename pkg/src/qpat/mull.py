"""Multilinear formulation: coefficients, photon fields and heating as joint unknowns.

The state is ``z = (mu, (Phi_i, H_i)_i)``. For each illumination the
transport equation, the heating relation and the data equation become
separate quadratic misfits

    J1 = 1/2 ||M(mu) Phi_i - b_i||^2_W        (transport residual)
    J2 = 1/2 ||mu_a A Phi_i - H_i||^2_X       (heating relation)
    J3 = 1/2 ||v_i - U_i H_i||^2_Y            (data)
    J4 = 1/2 ||L mu||^2_Z                      (smoothness)

and stochastic gradient steps on one ``(i, l)`` pair at a time never solve
the transport equation. ``M(mu) Phi`` is bilinear, so every misfit is a
polynomial of degree at most four along a line and the step size is found
exactly.

The transport residual is the weak (test-function integrated) residual, so
its natural size is ``w_j m_n`` per entry; ``W = diag(w_j m_n)^{-1}`` turns
it into the discrete L2 norm of the strong residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import time
from typing import Callable

import numpy as np

from .forward import ForwardModel
from .optim_standard import InverseProblem
from .regularizers import dykstra
from .rte import ParameterPair, average_A
from .trace import IterateTrace, solve_counts

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """A misfit grew beyond the divergence guard; ``trace`` holds the run so far."""

    def __init__(self, message: str, trace: IterateTrace):
        super().__init__(message)
        self.trace = trace


@dataclass
class PenaltyWeights:
    a1: float = 1.0
    a2: float = 1.0
    a3: float = 1.0
    lam: float = 2e-8

    def __post_init__(self):
        if min(self.a1, self.a2, self.a3) <= 0 or self.lam < 0:
            raise ValueError("need a1, a2, a3 > 0 and lam >= 0")

    def __getitem__(self, l: int) -> float:
        return (self.a1, self.a2, self.a3, self.lam)[l - 1]


@dataclass
class MullState:
    mu: ParameterPair
    phi: list
    H: list

    def copy(self) -> "MullState":
        return MullState(self.mu.copy(), [p.copy() for p in self.phi], [h.copy() for h in self.H])


@dataclass
class MullGradient:
    """Gradient of one misfit; blocks the misfit does not depend on are ``None``."""

    i: int
    mu_a: np.ndarray | None = None
    mu_s: np.ndarray | None = None
    phi: np.ndarray | None = None
    H: np.ndarray | None = None

    def is_zero(self) -> bool:
        return all(b is None or not np.any(b) for b in (self.mu_a, self.mu_s, self.phi, self.H))


@dataclass
class MullConfig:
    """Settings of the multilinear stochastic gradient methods.

    ``step`` is used when ``line_search`` is off or the exact step is not
    defined. ``inner_steps`` repeats every transport-residual draw.
    ``dykstra_in_projected`` adds the smoothing prox after transport and
    heating steps of the projected variant as well.
    """

    max_iter: int = 1000
    seed: int = 0
    inner_steps: int = 40
    line_search: bool = True
    step: float = 0.5
    estimate_mu_s: bool = False
    dykstra_in_projected: bool = False
    dykstra_max_iter: int = 50
    dykstra_tol: float = 1e-8
    divergence_factor: float = 1e6
    checkpoint: Callable | None = field(default=None, repr=False)
    checkpoint_every: int = 0


class MullProblem:
    """Misfits, gradients and exact line searches of the multilinear formulation.

    Parameters
    ----------
    problem : InverseProblem
        Supplies the discretization, wave operator, data, penalty and
        admissible set.
    weights : PenaltyWeights
    estimate_mu_s : bool
        If false the scattering block of every gradient is dropped.
    """

    def __init__(self, problem: InverseProblem, weights: PenaltyWeights | None = None, estimate_mu_s: bool = False):
        self.problem = problem
        self.model: ForwardModel = problem.model
        self.disc = self.model.disc
        self.wave = self.model.wave
        self.weights = weights or PenaltyWeights()
        self.estimate_mu_s = estimate_mu_s
        m = self.disc.mass
        self.mass = m
        self._w1 = 1.0 / (self.disc.w * m)[:, None]
        self._yw = self.wave.geometry.y_weights()
        self._masks = [il.mask for il in self.model.illuminations]

    @property
    def n(self) -> int:
        return self.problem.n

    # -- residuals --------------------------------------------------------
    def _r1(self, z: MullState, i: int) -> np.ndarray:
        mu = z.mu
        return self.disc.apply(mu.mu_a, mu.mu_s, z.phi[i]) - self.model.rhs(i)

    def _r2(self, z: MullState, i: int) -> np.ndarray:
        return z.mu.mu_a * average_A(z.phi[i]) - z.H[i]

    def _r3(self, z: MullState, i: int) -> np.ndarray:
        return np.where(self._masks[i], self.problem.data[i] - self.wave.forward(z.H[i]), 0.0)

    def _norm2(self, l: int, r) -> float:
        if l == 1:
            return float(np.sum(self._w1 * r * r))
        if l == 2:
            return float(np.sum(self.mass * r * r))
        if l == 3:
            return float(np.sum(self._yw * r * r))
        za, zs = r
        return self.problem.reg.z_weight * float(za @ za + zs @ zs)

    def _inner(self, l: int, r, s) -> float:
        if l == 1:
            return float(np.sum(self._w1 * r * s))
        if l == 2:
            return float(np.sum(self.mass * r * s))
        if l == 3:
            return float(np.sum(self._yw * r * s))
        return self.problem.reg.z_weight * float(r[0] @ s[0] + r[1] @ s[1])

    # -- misfits ----------------------------------------------------------
    def eval_J(self, l: int, i: int, z: MullState) -> float:
        """Weighted misfit ``a_l J_l`` of illumination ``i`` (``J4`` ignores ``i``)."""
        if l == 1:
            r = self._r1(z, i)
        elif l == 2:
            r = self._r2(z, i)
        elif l == 3:
            r = self._r3(z, i)
        elif l == 4:
            r = self.problem.reg.apply(z.mu.mu_a, z.mu.mu_s)
        else:
            raise ValueError(f"misfit index must be 1..4, got {l}")
        return 0.5 * self.weights[l] * self._norm2(l, r)

    def total(self, z: MullState, include_penalty: bool = True) -> float:
        val = sum(self.eval_J(l, i, z) for i in range(self.n) for l in (1, 2, 3))
        return val + (self.eval_J(4, 0, z) if include_penalty else 0.0)

    def grad_J(self, l: int, i: int, z: MullState) -> MullGradient:
        """Gradient of ``a_l J_l`` in the discrete L2 products of each block."""
        a = self.weights[l]
        mu = z.mu
        g = MullGradient(i=i)
        m = self.mass
        if l == 1:
            rho = self._w1 * self._r1(z, i)
            g.phi = a * self.disc.apply_transpose(mu.mu_a, mu.mu_s, rho) * self._w1
            ga, gs = self.disc.dmu_transpose(rho, z.phi[i])
            g.mu_a = a * ga / m
            g.mu_s = a * gs / m
        elif l == 2:
            r = self._r2(z, i)
            g.mu_a = a * average_A(z.phi[i]) * r
            g.H = -a * r
            g.phi = np.repeat((a * mu.mu_a * r)[:, None], self.disc.n_theta, axis=1)
        elif l == 3:
            g.H = -a * self.wave.adjoint(self._r3(z, i), self._masks[i])
        elif l == 4:
            ga, gs = self.problem.reg.normal(mu.mu_a, mu.mu_s)
            g.mu_a, g.mu_s = a * ga, a * gs
        else:
            raise ValueError(f"misfit index must be 1..4, got {l}")
        if not self.estimate_mu_s:
            g.mu_s = None
        return g

    # -- exact line search -----------------------------------------------
    def _line_polynomial(self, l: int, i: int, z: MullState, d: MullGradient):
        """Residual ``r(t) = r0 + t r1 + t^2 r2`` of ``J_l(z - t d)``."""
        mu = z.mu
        n = self.disc.n_nodes
        da = d.mu_a if d.mu_a is not None else np.zeros(n)
        ds = d.mu_s if d.mu_s is not None else np.zeros(n)
        if l == 1:
            phi = z.phi[i]
            dphi = d.phi if d.phi is not None else np.zeros_like(phi)
            r0 = self._r1(z, i)
            r1 = -(self.disc.apply(mu.mu_a, mu.mu_s, dphi) + self.disc.apply_dmu(da, ds, phi))
            r2 = self.disc.apply_dmu(da, ds, dphi)
            return r0, r1, r2
        if l == 2:
            aphi = average_A(z.phi[i])
            adphi = average_A(d.phi) if d.phi is not None else np.zeros(n)
            dH = d.H if d.H is not None else np.zeros(n)
            r0 = self._r2(z, i)
            r1 = -(da * aphi + mu.mu_a * adphi - dH)
            r2 = da * adphi
            return r0, r1, r2
        if l == 3:
            r0 = self._r3(z, i)
            dH = d.H if d.H is not None else np.zeros(n)
            r1 = np.where(self._masks[i], self.wave.forward(dH), 0.0)
            return r0, r1, None
        reg = self.problem.reg
        r0 = reg.apply(mu.mu_a, mu.mu_s)
        la, ls = reg.apply(da, ds)
        return r0, (-la, -ls), None

    def line_search_exact(self, l: int, i: int, z: MullState, d: MullGradient, fallback: float = 0.5) -> float:
        """Step ``t`` minimizing ``J_l(z - t d)`` over the real line.

        The restriction is a polynomial of degree four (``l = 1, 2``) or two
        (``l = 3, 4``); the global minimizer is taken among the real critical
        points. ``fallback`` is returned when the restriction is not bounded
        below numerically; a zero direction gives a zero step.
        """
        if d.is_zero():
            return 0.0
        r0, r1, r2 = self._line_polynomial(l, i, z, d)
        c1 = self._inner(l, r0, r1)
        c2 = 0.5 * self._norm2(l, r1)
        if r2 is None:
            c3 = c4 = 0.0
        else:
            c2 += self._inner(l, r0, r2)
            c3 = self._inner(l, r1, r2)
            c4 = 0.5 * self._norm2(l, r2)
        coeffs = (c4, c3, c2, c1)
        scale = max(abs(c) for c in coeffs)
        if scale == 0.0:
            return 0.0
        if c4 <= 1e-14 * scale:
            if c3 != 0.0 and abs(c3) > 1e-14 * scale:
                return fallback
            if c2 <= 0.0:
                return fallback
            return -c1 / (2.0 * c2)
        roots = np.roots([4 * c4, 3 * c3, 2 * c2, c1])
        real = roots[np.abs(roots.imag) <= 1e-9 * np.maximum(1.0, np.abs(roots.real))].real
        cand = np.concatenate([[0.0], real])
        vals = c4 * cand**4 + c3 * cand**3 + c2 * cand**2 + c1 * cand
        return float(cand[np.argmin(vals)])

    # -- state updates ----------------------------------------------------
    def step(self, z: MullState, d: MullGradient, t: float) -> None:
        """In-place ``z <- z - t d`` without projection."""
        mu = z.mu
        if d.mu_a is not None:
            mu.mu_a = mu.mu_a - t * d.mu_a
        if d.mu_s is not None:
            mu.mu_s = mu.mu_s - t * d.mu_s
        if d.phi is not None:
            z.phi[d.i] = z.phi[d.i] - t * d.phi
        if d.H is not None:
            z.H[d.i] = z.H[d.i] - t * d.H

    def project(self, z: MullState) -> None:
        a, s = self.problem.feasible.project(z.mu.mu_a, z.mu.mu_s)
        z.mu = ParameterPair(a, s, z.mu.bounds)

    def smooth(self, z: MullState, s: float, config: MullConfig) -> None:
        res = dykstra(
            z.mu.mu_a, z.mu.mu_s, s * self.weights.lam, self.problem.reg, self.problem.feasible,
            config.dykstra_max_iter, config.dykstra_tol,
        )
        if not res.converged:
            log.warning("Dykstra stopped after %d cycles without reaching tolerance", res.iterations)
        z.mu = ParameterPair(res.mu_a, res.mu_s, z.mu.bounds)


def init_state(problem: InverseProblem, mu0: ParameterPair, warm: bool = True) -> MullState:
    """Starting state: one transport solve per illumination at ``mu0``.

    With ``warm=False`` the photon fields and heating start at zero.
    """
    if not mu0.is_feasible():
        raise ValueError("initial coefficients are not admissible")
    model = problem.model
    mu = mu0.copy()
    if warm:
        phi = [model.photon(mu, i).copy() for i in range(problem.n)]
        H = [mu.mu_a * average_A(p) for p in phi]
    else:
        shape = (model.disc.n_nodes, model.disc.n_theta)
        phi = [np.zeros(shape) for _ in range(problem.n)]
        H = [np.zeros(model.disc.n_nodes) for _ in range(problem.n)]
    return MullState(mu, phi, H)


def _run(mp: MullProblem, z0: MullState, config: MullConfig, proximal: bool) -> tuple[MullState, IterateTrace]:
    problem = mp.problem
    z = z0.copy()
    if not z.mu.is_feasible():
        raise ValueError("initial coefficients are not admissible")
    rng = np.random.default_rng(config.seed)
    n_l = 3 if proximal else 4
    trace = IterateTrace()
    t0 = time.perf_counter()
    guard = config.divergence_factor * max(mp.total(z), np.finfo(float).tiny)

    def record(k, i="", l="", value=float("nan")):
        ea, es = problem.errors(z.mu)
        trace.append(
            iter=k,
            picked_i=i,
            picked_l=l,
            objective=value,
            fidelity=value if l == 3 else "",
            penalty=value if l in (1, 2, 4) else "",
            rel_err_mu_a=ea,
            rel_err_mu_s=es,
            wall_s=time.perf_counter() - t0,
            **solve_counts(mp.model.counts),
        )

    record(0)
    for k in range(config.max_iter):
        i = int(rng.integers(problem.n))
        l = int(rng.integers(1, n_l + 1))
        repeats = config.inner_steps if l == 1 else 1
        t = 0.0
        for _ in range(repeats):
            d = mp.grad_J(l, i, z)
            t = mp.line_search_exact(l, i, z, d, config.step) if config.line_search else config.step
            mp.step(z, d, t)
            if d.mu_a is not None or d.mu_s is not None:
                mp.project(z)
        if l in (1, 2) and (proximal or config.dykstra_in_projected):
            mp.smooth(z, t, config)
        value = mp.eval_J(l, i, z)
        record(k + 1, i, l, value)
        if not np.isfinite(value) or value > guard:
            trace.status = "diverged"
            raise DivergenceError(f"misfit J{l} of illumination {i} reached {value:.3e} at iteration {k + 1}", trace)
        if config.checkpoint is not None and config.checkpoint_every and (k + 1) % config.checkpoint_every == 0:
            config.checkpoint(k + 1, z.mu, trace)
    trace.status = "max_iter"
    return z, trace


def mull_projected_sgd(problem: InverseProblem, z0: MullState, weights: PenaltyWeights | None = None, config: MullConfig | None = None):
    """Stochastic gradient on ``sum_i (a1 J1 + a2 J2 + a3 J3) + lam J4`` with projection.

    Each step draws ``i`` and ``l in {1, 2, 3, 4}`` uniformly and moves
    along ``-grad(a_l J_l)`` with the exact step, then projects ``mu`` onto
    the admissible set. Photon fields and heating are unconstrained.
    """
    config = config or MullConfig()
    mp = MullProblem(problem, weights, config.estimate_mu_s)
    return _run(mp, z0, config, proximal=False)


def mull_proximal_sgd(problem: InverseProblem, z0: MullState, weights: PenaltyWeights | None = None, config: MullConfig | None = None):
    """Stochastic proximal gradient with the smoothing penalty in the prox.

    Each step draws ``i`` and ``l in {1, 2, 3}``; after transport and
    heating steps the coefficients go through the Dykstra prox of
    ``t lam J4`` plus the admissible-set constraint.
    """
    config = config or MullConfig()
    mp = MullProblem(problem, weights, config.estimate_mu_s)
    return _run(mp, z0, config, proximal=True)

"""Multi-illumination forward operators, their derivatives, adjoints and fidelities."""

from __future__ import annotations

from dataclasses import dataclass
import hashlib

import numpy as np

from .acoustic import WaveOperator, y_inner
from .rte import (
    ParameterPair,
    SourcePair,
    TransportDiscretization,
    TransportSystem,
    average_A,
    solve_adjoint_rte,
    solve_rte,
    solve_rte_weak,
)


@dataclass
class Illumination:
    """One optical source paired with its detector arc and time horizon."""

    index: int
    side: str
    source: SourcePair
    arc: np.ndarray
    horizon: float
    mask: np.ndarray


def fingerprint(mu: ParameterPair) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.ascontiguousarray(mu.mu_a).tobytes())
    h.update(np.ascontiguousarray(mu.mu_s).tobytes())
    return h.hexdigest()


def is_feasible_direction(mu: ParameterPair, h_a: np.ndarray, h_s: np.ndarray) -> bool:
    ba, bs = mu.bounds
    ok = True
    for m, hh, b in ((mu.mu_a, h_a, ba), (mu.mu_s, h_s, bs)):
        ok &= not np.any((m <= 0.0) & (hh < 0.0))
        ok &= not np.any((m >= b) & (hh > 0.0))
    return bool(ok)


class ForwardModel:
    """Forward operators ``F_i = U_i o H_i`` for a set of illuminations.

    Photon fields are cached per coefficient fingerprint, so a fidelity value
    and its gradient at the same ``mu`` share a single transport solve. The
    cache only holds the most recent ``mu``.

    Parameters
    ----------
    disc : TransportDiscretization
    wave : WaveOperator
    illuminations : list of Illumination
    tol : float
        Relative residual for the transport solves.
    """

    def __init__(self, disc: TransportDiscretization, wave: WaveOperator, illuminations: list[Illumination], tol: float = 1e-8):
        if wave.mesh.n_nodes != disc.n_nodes:
            raise ValueError("wave operator and transport discretization use different meshes")
        self.disc = disc
        self.wave = wave
        self.illuminations = list(illuminations)
        self.tol = tol
        self._rhs = [disc.rhs(il.source) for il in self.illuminations]
        self._yw = wave.geometry.y_weights()
        self._key = None
        self._system: TransportSystem | None = None
        self._phi: dict[int, np.ndarray] = {}

    @property
    def counts(self):
        return self.disc.counts

    @property
    def n_illuminations(self) -> int:
        return len(self.illuminations)

    @property
    def mass(self) -> np.ndarray:
        return self.disc.mass

    def clear_cache(self) -> None:
        self._key, self._system, self._phi = None, None, {}

    def system(self, mu: ParameterPair) -> TransportSystem:
        key = fingerprint(mu)
        if key != self._key:
            self._system = self.disc.assemble(mu)
            self._key = key
            self._phi = {}
        return self._system

    def rhs(self, i: int) -> np.ndarray:
        return self._rhs[i]

    # -- forward ---------------------------------------------------------
    def photon(self, mu: ParameterPair, i: int) -> np.ndarray:
        """``Phi_i = T_i(mu)``, cached."""
        system = self.system(mu)
        if i not in self._phi:
            self._phi[i] = solve_rte_weak(system, self._rhs[i], tol=self.tol)
        return self._phi[i]

    def heating_for_source(self, mu: ParameterPair, q: SourcePair) -> np.ndarray:
        phi = solve_rte(self.system(mu), q, tol=self.tol)
        return mu.mu_a * average_A(phi)

    def heating(self, mu: ParameterPair, i: int) -> np.ndarray:
        return mu.mu_a * average_A(self.photon(mu, i))

    def forward(self, mu: ParameterPair, i: int) -> np.ndarray:
        return np.where(self.illuminations[i].mask, self.wave.forward(self.heating(mu, i)), 0.0)

    def residual(self, mu: ParameterPair, i: int, data: np.ndarray) -> np.ndarray:
        return np.where(self.illuminations[i].mask, self.forward(mu, i) - data, 0.0)

    def y_norm(self, v: np.ndarray) -> float:
        return float(np.sqrt(max(y_inner(v, v, self.wave.geometry), 0.0)))

    def fidelity(self, mu: ParameterPair, i: int, data: np.ndarray) -> float:
        r = self.residual(mu, i, data)
        return 0.5 * y_inner(r, r, self.wave.geometry)

    # -- derivative and adjoint -----------------------------------------
    def derivative_apply(self, mu: ParameterPair, h_a: np.ndarray, h_s: np.ndarray, i: int) -> np.ndarray:
        """One-sided directional derivative ``F_i'(mu) h``."""
        if not is_feasible_direction(mu, h_a, h_s):
            raise ValueError("direction is not feasible at mu")
        phi = self.photon(mu, i)
        b = -self.disc.apply_dmu(h_a, h_s, phi)
        dphi = solve_rte_weak(self.system(mu), b, tol=self.tol)
        p0 = h_a * average_A(phi) + mu.mu_a * average_A(dphi)
        return np.where(self.illuminations[i].mask, self.wave.forward(p0), 0.0)

    def adjoint_apply(self, mu: ParameterPair, v: np.ndarray, i: int) -> tuple[np.ndarray, np.ndarray]:
        """``F_i'(mu)^* v`` in the lumped L2 product on coefficients.

        One forward solve (shared through the cache) and one adjoint solve.
        """
        phi = self.photon(mu, i)
        mask = self.illuminations[i].mask
        g_heat = self.wave.transpose(np.where(mask, v, 0.0) * self._yw)
        nt = self.disc.n_theta
        source = -self.disc.w * np.repeat((g_heat * mu.mu_a)[:, None], nt, axis=1)
        phi_adj = solve_adjoint_rte(self.system(mu), source, tol=self.tol)
        ga, gs = self.disc.dmu_transpose(phi_adj, phi)
        ga = ga + g_heat * average_A(phi)
        return ga / self.mass, gs / self.mass

    def grad_fidelity(self, mu: ParameterPair, i: int, data: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        """Gradient of ``F_i`` and the fidelity value at ``mu``."""
        r = self.residual(mu, i, data)
        ga, gs = self.adjoint_apply(mu, r, i)
        return ga, gs, 0.5 * y_inner(r, r, self.wave.geometry)

    def grad_fidelity_sum(self, mu: ParameterPair, indices, data) -> tuple[np.ndarray, np.ndarray, float]:
        """Sum of gradients over ``indices`` in increasing index order."""
        ga = np.zeros(self.disc.n_nodes)
        gs = np.zeros(self.disc.n_nodes)
        total = 0.0
        for i in sorted(indices):
            a, s, f = self.grad_fidelity(mu, i, data[i])
            ga += a
            gs += s
            total += f
        return ga, gs, total

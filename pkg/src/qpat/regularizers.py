"""Laplacian smoothing penalty, its proximal map, and Dykstra splitting.

The penalty is ``G(mu) = lam/2 (||L_a mu_a||_Z^2 + ||L_s mu_s||_Z^2)`` with
``L_s = 100 L_a``. The proximal step of ``s G`` restricted to the
admissible box (with prescribed boundary values) is computed by Dykstra's
alternating scheme between the unconstrained quadratic proximal map and the
projection onto the box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import SpatialMesh

SCATTER_SCALE = 100.0


@dataclass
class RegOperator:
    """Linear penalty operators ``L_a, L_s`` with the Z product ``z_weight * sum``.

    ``mass`` is the lumped weight of the coefficient space, so the adjoint is
    ``L^* = diag(mass)^{-1} L^T z_weight``.
    """

    L_a: sp.csr_matrix
    L_s: sp.csr_matrix
    mass: np.ndarray
    z_weight: float = 1.0

    def apply(self, mu_a: np.ndarray, mu_s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.L_a @ mu_a, self.L_s @ mu_s

    def adjoint(self, z_a: np.ndarray, z_s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (self.z_weight * (self.L_a.T @ z_a)) / self.mass, (self.z_weight * (self.L_s.T @ z_s)) / self.mass

    def normal(self, mu_a: np.ndarray, mu_s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``L^* L mu``: the gradient of ``1/2 ||L mu||_Z^2``."""
        return self.adjoint(*self.apply(mu_a, mu_s))

    def value(self, mu_a: np.ndarray, mu_s: np.ndarray) -> float:
        """``1/2 ||L mu||_Z^2`` (without the factor ``lam``)."""
        za, zs = self.apply(mu_a, mu_s)
        return 0.5 * self.z_weight * float(za @ za + zs @ zs)


def laplacian_matrix(mesh: SpatialMesh) -> sp.csr_matrix:
    """Five-point Laplacian on interior nodes, applied to the full nodal vector.

    Rows are indexed by interior nodes; boundary values enter as the usual
    lift, so ``L mu`` is the discrete Laplacian of ``mu`` with its own
    boundary data.
    """
    n = mesh.n_per_side
    h2 = mesh.h**2
    idx = np.arange(n * n).reshape(n, n)
    inner = idx[1:-1, 1:-1].ravel()
    m = inner.size
    r = np.arange(m)
    rows = np.concatenate([r] * 5)
    cols = np.concatenate([inner, inner - 1, inner + 1, inner - n, inner + n])
    vals = np.concatenate([np.full(m, -4.0), np.ones(4 * m)]) / h2
    return sp.coo_matrix((vals, (rows, cols)), shape=(m, n * n)).tocsr()


def laplacian_regularizer(mesh: SpatialMesh, scatter_scale: float = SCATTER_SCALE) -> RegOperator:
    L = laplacian_matrix(mesh)
    return RegOperator(L_a=L, L_s=(scatter_scale * L).tocsr(), mass=mesh.lumped_mass(), z_weight=mesh.h**2)


@dataclass
class FeasibleSet:
    """Box ``[0, upper]`` with values pinned on ``fixed_nodes``.

    ``fixed_a`` and ``fixed_s`` are the pinned values (same length as
    ``fixed_nodes``). Infinite bounds and no pinned nodes give the whole space.
    """

    upper: tuple[float, float] = (3.0, 6.0)
    lower: tuple[float, float] = (0.0, 0.0)
    fixed_nodes: np.ndarray | None = None
    fixed_a: np.ndarray | None = None
    fixed_s: np.ndarray | None = None

    @classmethod
    def whole_space(cls) -> "FeasibleSet":
        return cls(upper=(np.inf, np.inf), lower=(-np.inf, -np.inf))

    @classmethod
    def with_boundary(cls, mesh: SpatialMesh, mu_a: np.ndarray, mu_s: np.ndarray, upper=(3.0, 6.0)) -> "FeasibleSet":
        b = mesh.boundary_nodes
        return cls(upper=tuple(upper), fixed_nodes=b, fixed_a=np.asarray(mu_a)[b].copy(), fixed_s=np.asarray(mu_s)[b].copy())

    def project(self, mu_a: np.ndarray, mu_s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = np.clip(mu_a, self.lower[0], self.upper[0])
        s = np.clip(mu_s, self.lower[1], self.upper[1])
        if self.fixed_nodes is not None:
            a[self.fixed_nodes] = self.fixed_a
            s[self.fixed_nodes] = self.fixed_s
        return a, s

    def project_positive(self, mu_a: np.ndarray, mu_s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Clamp at the lower bounds only."""
        return np.maximum(mu_a, self.lower[0]), np.maximum(mu_s, self.lower[1])


def _prox_one(L: sp.csr_matrix, mass: np.ndarray, z: float, x: np.ndarray, c: float, tol: float) -> np.ndarray:
    if c == 0.0 or L.nnz == 0:
        return x.copy()
    A = sp.diags(mass) + (c * z) * (L.T @ L)
    A = A.tocsr()
    inv_d = 1.0 / A.diagonal()
    P = spla.LinearOperator(A.shape, matvec=lambda v: inv_d * v, dtype=float)
    b = mass * x
    y, info = spla.cg(A, b, x0=x.copy(), rtol=tol, atol=0.0, maxiter=10 * x.size, M=P)
    if info != 0:
        raise RuntimeError(f"conjugate gradients for the quadratic prox did not converge (info={info})")
    return y


def prox_quad(x_a: np.ndarray, x_s: np.ndarray, s_lambda: float, reg: RegOperator, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Proximal map of ``s lam/2 ||L mu||_Z^2`` in the lumped L2 product.

    Solves ``(diag(m) + s lam z L^T L) y = diag(m) x`` for each coefficient.
    """
    if s_lambda < 0:
        raise ValueError("s * lambda must be non-negative")
    return (
        _prox_one(reg.L_a, reg.mass, reg.z_weight, np.asarray(x_a, float), s_lambda, tol),
        _prox_one(reg.L_s, reg.mass, reg.z_weight, np.asarray(x_s, float), s_lambda, tol),
    )


@dataclass
class DykstraResult:
    mu_a: np.ndarray
    mu_s: np.ndarray
    converged: bool
    iterations: int


def dykstra(
    x_a: np.ndarray,
    x_s: np.ndarray,
    s_lambda: float,
    reg: RegOperator,
    feasible: FeasibleSet,
    max_iter: int = 50,
    tol: float = 1e-8,
) -> DykstraResult:
    """Proximal map of ``s G + indicator(D)`` by Dykstra's algorithm.

    Stops when the relative change of the feasible iterate drops below
    ``tol`` or after ``max_iter`` cycles; ``converged`` reports which.
    """
    xa, xs = np.asarray(x_a, float).copy(), np.asarray(x_s, float).copy()
    pa, ps = np.zeros_like(xa), np.zeros_like(xs)
    qa, qs = np.zeros_like(xa), np.zeros_like(xs)
    for k in range(1, max_iter + 1):
        ya, ys = prox_quad(xa + pa, xs + ps, s_lambda, reg)
        na, ns = feasible.project(ya + qa, ys + qs)
        pa, ps = xa + pa - ya, xs + ps - ys
        qa, qs = ya + qa - na, ys + qs - ns
        change = np.sqrt(np.sum((na - xa) ** 2) + np.sum((ns - xs) ** 2))
        scale = np.sqrt(np.sum(xa**2) + np.sum(xs**2))
        xa, xs = na, ns
        if change <= tol * max(scale, 1e-300):
            return DykstraResult(xa, xs, True, k)
    return DykstraResult(xa, xs, False, max_iter)

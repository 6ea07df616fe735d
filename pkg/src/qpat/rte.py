"""Streamline-diffusion finite elements for the stationary transport equation.

Unknowns are nodal values ``Phi[n, j]`` of a photon density that is P1 in
space; angular integrals use the nodal (trapezoidal) rule on the uniform
direction grid, i.e. lumped P1 in angle. The test function of a trial
basis ``psi_i`` is ``psi_i + D theta . grad psi_i``. Reaction terms use the
vertex quadrature rule, so every coefficient-dependent term is a diagonal
scaling in space placed between the precomputed angular blocks. This makes
reassembly under a new ``mu`` free, and the matrix-free product is a handful
of sparse-times-dense products.

All operators here act on coefficient vectors; ``apply`` returns the weak
residual (test-function integrated), and transposes are exact algebraic
transposes of that map.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import SIDE_NORMALS, AngularGrid, SpatialMesh
from .scattering import ScatteringKernel

log = logging.getLogger(__name__)

TOL_LIN = 1e-8


class SolverError(RuntimeError):
    """Raised when the transport solve does not reach its tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass
class ParameterPair:
    """Nodal absorption and scattering coefficients in 1/cm."""

    mu_a: np.ndarray
    mu_s: np.ndarray
    bounds: tuple[float, float] = (3.0, 6.0)

    def __post_init__(self):
        self.mu_a = np.asarray(self.mu_a, dtype=float)
        self.mu_s = np.asarray(self.mu_s, dtype=float)
        if self.mu_a.shape != self.mu_s.shape or self.mu_a.ndim != 1:
            raise ValueError(
                f"mu_a and mu_s must be 1-d arrays of equal length, got {self.mu_a.shape}, {self.mu_s.shape}"
            )

    def is_feasible(self, atol: float = 0.0) -> bool:
        ba, bs = self.bounds
        return bool(
            np.all(self.mu_a >= -atol)
            and np.all(self.mu_s >= -atol)
            and np.all(self.mu_a <= ba + atol)
            and np.all(self.mu_s <= bs + atol)
        )

    def copy(self) -> "ParameterPair":
        return ParameterPair(self.mu_a.copy(), self.mu_s.copy(), self.bounds)


@dataclass
class SourcePair:
    """Interior source ``q_i`` and inflow boundary values ``q_o``.

    Both are node x direction arrays; ``None`` means zero. Only the inflow
    entries of ``q_o`` enter the right-hand side (the edge weight
    ``max(0, -nu . theta)`` vanishes elsewhere).
    """

    q_i: np.ndarray | None = None
    q_o: np.ndarray | None = None


def average_A(phi: np.ndarray) -> np.ndarray:
    """Angular integral ``sum_j w_j Phi[:, j]`` with uniform weights ``2pi/n``."""
    phi = np.asarray(phi, dtype=float)
    return phi.sum(axis=1) * (2.0 * np.pi / phi.shape[1])


def average_A_adjoint(w: np.ndarray, n_theta: int) -> np.ndarray:
    """Adjoint of :func:`average_A` for the weighted discrete inner products.

    With ``<f, g>_X = sum m f g`` and ``<Phi, Psi> = sum m w_j Phi Psi`` the
    adjoint replicates ``w`` over directions.
    """
    w = np.asarray(w, dtype=float)
    return np.repeat(w[:, None], n_theta, axis=1)


def photon_inner(phi: np.ndarray, psi: np.ndarray, mass: np.ndarray) -> float:
    """``sum_{n,j} m_n w_j phi psi`` on the uniform angular grid."""
    w = 2.0 * np.pi / phi.shape[1]
    return float(w * np.sum(mass[:, None] * phi * psi))


def _triangle_gradients(mesh: SpatialMesh):
    p = mesh.nodes[mesh.triangles]
    x, y = p[..., 0], p[..., 1]
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / (2 * area[:, None])
    gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / (2 * area[:, None])
    return area, gx, gy


def _pair_matrix(mesh: SpatialMesh, vals: np.ndarray) -> sp.csr_matrix:
    """Sum element contributions ``vals[t, a, b]`` into ``(tri[t,a], tri[t,b])``."""
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_nodes
    return sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(n, n)).tocsr()


class TransportDiscretization:
    """Precomputed, coefficient-independent pieces of the SD-FEM transport matrix.

    Parameters
    ----------
    mesh : SpatialMesh
    angles : AngularGrid
    kernel : ScatteringKernel
    sd : float, optional
        Streamline-diffusion coefficient ``D``; defaults to the mesh size.
    """

    def __init__(self, mesh: SpatialMesh, angles: AngularGrid, kernel: ScatteringKernel, sd: float | None = None):
        if kernel.n_theta != angles.n_theta:
            raise ValueError("scattering kernel and angular grid disagree on n_theta")
        self.mesh = mesh
        self.angles = angles
        self.kernel = kernel
        self.sd = float(mesh.h if sd is None else sd)
        self.counts: Counter = Counter()

        n, nt = mesh.n_nodes, angles.n_theta
        self.n_nodes, self.n_theta = n, nt
        self.w = angles.weight
        self.mass = mesh.lumped_mass()

        area, gx, gy = _triangle_gradients(mesh)
        third = (area / 3.0)[:, None, None]
        ones = np.ones((1, 1, 3))
        self.Gx = _pair_matrix(mesh, third * gx[:, :, None] * ones)
        self.Gy = _pair_matrix(mesh, third * gy[:, :, None] * ones)
        a = area[:, None, None]
        Sxx = _pair_matrix(mesh, a * gx[:, :, None] * gx[:, None, :])
        Syy = _pair_matrix(mesh, a * gy[:, :, None] * gy[:, None, :])
        Sxy = _pair_matrix(mesh, a * gx[:, :, None] * gy[:, None, :])
        Sxy = (Sxy + Sxy.T).tocsr()

        self.Mb = []
        for edges in mesh.edges:
            p = mesh.nodes[edges]
            length = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
            rows = np.concatenate([edges[:, 0], edges[:, 1], edges[:, 0], edges[:, 1]])
            cols = np.concatenate([edges[:, 0], edges[:, 1], edges[:, 1], edges[:, 0]])
            vals = np.concatenate([length / 3, length / 3, length / 6, length / 6])
            self.Mb.append(sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr())

        th = angles.directions
        tx, ty = th[:, 0], th[:, 1]
        side_dot = SIDE_NORMALS @ th.T  # (4, nt)
        self.pos = np.maximum(side_dot, 0.0)
        self.neg = np.maximum(-side_dot, 0.0)
        D = self.sd
        self._S_blocks = [Sxx, Sxy, Syy, *self.Mb]
        self._S_coef = np.vstack([D * tx * tx, D * tx * ty, D * ty * ty, self.pos])  # (7, nt)
        self._S_stack = sp.vstack(self._S_blocks).tocsr()
        self._S_stack_T = self._S_stack.T.tocsr()
        self._G_coef = np.vstack([tx, ty])
        self._G_stack = sp.vstack([self.Gx, self.Gy]).tocsr()
        self._G_stack_T = self._G_stack.T.tocsr()
        self._Mb_stack = sp.vstack(self.Mb).tocsr()

        # diagonals of the angular blocks, for Jacobi preconditioning
        dg = np.vstack([self.Gx.diagonal(), self.Gy.diagonal()])  # (2, n)
        ds = np.vstack([b.diagonal() for b in self._S_blocks])  # (7, n)
        self._diag_adv = (ds.T @ self._S_coef) - dg.T @ self._G_coef  # (n, nt)
        self._diag_E = self.mass[:, None] + D * (dg.T @ self._G_coef)

    # -- helpers -------------------------------------------------------
    def _check_field(self, phi: np.ndarray) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.n_nodes, self.n_theta):
            raise ValueError(f"photon field has shape {phi.shape}, expected {(self.n_nodes, self.n_theta)}")
        return phi

    def _scatter(self, phi: np.ndarray) -> np.ndarray:
        return phi @ self.kernel.matrix.T

    def _apply_E(self, x: np.ndarray) -> np.ndarray:
        """Reaction test-weighting ``m x + D (theta . G) x``, per direction."""
        g = (self._G_stack @ x).reshape(2, self.n_nodes, self.n_theta)
        return self.mass[:, None] * x + self.sd * np.einsum("rnj,rj->nj", g, self._G_coef)

    def _apply_E_T(self, y: np.ndarray) -> np.ndarray:
        stacked = (y[None, :, :] * self._G_coef[:, None, :]).reshape(2 * self.n_nodes, self.n_theta)
        return self.mass[:, None] * y + self.sd * (self._G_stack_T @ stacked)

    # -- the transport operator -----------------------------------------
    def apply(self, mu_a: np.ndarray, mu_s: np.ndarray, phi: np.ndarray) -> np.ndarray:
        """Weak residual ``M(mu) Phi`` (no source terms)."""
        phi = self._check_field(phi)
        self.counts["apply_M"] += 1
        n, nt = self.n_nodes, self.n_theta
        P = (mu_a + mu_s)[:, None] * phi - mu_s[:, None] * self._scatter(phi)
        s = (self._S_stack @ phi).reshape(7, n, nt)
        out = np.einsum("rnj,rj->nj", s, self._S_coef)
        g = (self._G_stack @ (self.sd * P - phi)).reshape(2, n, nt)
        out += np.einsum("rnj,rj->nj", g, self._G_coef)
        out += self.mass[:, None] * P
        return self.w * out

    def apply_transpose(self, mu_a: np.ndarray, mu_s: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Exact transpose of :meth:`apply`."""
        y = self._check_field(y)
        self.counts["apply_MT"] += 1
        n, nt = self.n_nodes, self.n_theta
        Y = self.w * y
        Z = (Y[None, :, :] * self._S_coef[:, None, :]).reshape(7 * n, nt)
        out = self._S_stack_T @ Z
        V = self._G_stack_T @ (Y[None, :, :] * self._G_coef[:, None, :]).reshape(2 * n, nt)
        Q = self.mass[:, None] * Y + self.sd * V
        out -= V
        out += (mu_a + mu_s)[:, None] * Q - (mu_s[:, None] * Q) @ self.kernel.matrix
        return out

    def apply_dmu(self, h_a: np.ndarray, h_s: np.ndarray, phi: np.ndarray) -> np.ndarray:
        """Derivative of ``M(mu) Phi`` with respect to ``mu`` in direction ``h``."""
        phi = self._check_field(phi)
        P = (h_a + h_s)[:, None] * phi - h_s[:, None] * self._scatter(phi)
        return self.w * self._apply_E(P)

    def dmu_transpose(self, y: np.ndarray, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Euclidean gradients in ``h`` of ``<y, apply_dmu(h, Phi)>``."""
        Q = self._apply_E_T(self.w * y)
        ga = np.sum(Q * phi, axis=1)
        gs = np.sum(Q * (phi - self._scatter(phi)), axis=1)
        return ga, gs

    def rhs(self, q: SourcePair) -> np.ndarray:
        """Load vector from interior and inflow-boundary sources."""
        n, nt = self.n_nodes, self.n_theta
        b = np.zeros((n, nt))
        if q.q_i is not None:
            b += self._apply_E(self._check_field(q.q_i))
        if q.q_o is not None:
            qo = self._check_field(q.q_o)
            s = (self._Mb_stack @ qo).reshape(4, n, nt)
            b += np.einsum("snj,sj->nj", s, self.neg)
        return self.w * b

    def diagonal(self, mu_a: np.ndarray, mu_s: np.ndarray) -> np.ndarray:
        kdiag = np.diag(self.kernel.matrix)
        react = (mu_a + mu_s)[:, None] - mu_s[:, None] * kdiag[None, :]
        return self.w * (self._diag_adv + self._diag_E * react)

    def assemble(self, mu: ParameterPair) -> "TransportSystem":
        if mu.mu_a.shape != (self.n_nodes,):
            raise ValueError(f"coefficients have {mu.mu_a.size} nodes, mesh has {self.n_nodes}")
        if not mu.is_feasible():
            raise ValueError("infeasible coefficients: need 0 <= mu_a <= %g and 0 <= mu_s <= %g" % mu.bounds)
        return TransportSystem(self, mu.mu_a.copy(), mu.mu_s.copy())

    def sparse_matrix(self, mu_a: np.ndarray, mu_s: np.ndarray) -> sp.csr_matrix:
        """Explicit matrix over node-major unknowns ``n * n_theta + j``.

        Dense in the angular index; intended for small grids and checks.
        """
        n, nt = self.n_nodes, self.n_theta
        th = self.angles.directions
        K = self.kernel.matrix
        rows, cols, vals = [], [], []
        for j in range(nt):
            A = (
                -th[j, 0] * self.Gx
                - th[j, 1] * self.Gy
                + sum(c * B for c, B in zip(self._S_coef[:, j], self._S_blocks))
            ).tocoo()
            rows.append(A.row * nt + j)
            cols.append(A.col * nt + j)
            vals.append(self.w * A.data)
            E = (sp.diags(self.mass) + self.sd * (th[j, 0] * self.Gx + th[j, 1] * self.Gy)).tocoo()
            for l in range(nt):
                v = -K[j, l] * E.data * mu_s[E.col]
                if l == j:
                    v = v + E.data * (mu_a + mu_s)[E.col]
                rows.append(E.row * nt + j)
                cols.append(E.col * nt + l)
                vals.append(self.w * v)
        N = n * nt
        return sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
        ).tocsr()


@dataclass
class TransportSystem:
    """The transport matrix ``M^(h)(mu)`` bound to a coefficient pair."""

    disc: TransportDiscretization
    mu_a: np.ndarray
    mu_s: np.ndarray
    sd_coefficient: float = field(init=False)

    def __post_init__(self):
        self.sd_coefficient = self.disc.sd

    @property
    def shape(self) -> tuple[int, int]:
        N = self.disc.n_nodes * self.disc.n_theta
        return (N, N)

    @cached_property
    def diagonal(self) -> np.ndarray:
        return self.disc.diagonal(self.mu_a, self.mu_s)

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        return self.disc.sparse_matrix(self.mu_a, self.mu_s)

    def apply(self, phi: np.ndarray) -> np.ndarray:
        return self.disc.apply(self.mu_a, self.mu_s, phi)

    def apply_transpose(self, y: np.ndarray) -> np.ndarray:
        return self.disc.apply_transpose(self.mu_a, self.mu_s, y)

    def rhs(self, q: SourcePair) -> np.ndarray:
        return self.disc.rhs(q)


def assemble(mesh: SpatialMesh, angles: AngularGrid, kernel: ScatteringKernel, mu: ParameterPair, sd: float | None = None) -> TransportSystem:
    """Build a transport system from scratch (see :class:`TransportDiscretization`)."""
    return TransportDiscretization(mesh, angles, kernel, sd).assemble(mu)


def apply_M(mu: ParameterPair, phi: np.ndarray, disc: TransportDiscretization) -> np.ndarray:
    return disc.apply(mu.mu_a, mu.mu_s, phi)


def _gmres(matvec, b: np.ndarray, diag: np.ndarray, tol: float, restart: int, x0=None) -> np.ndarray:
    shape = b.shape
    bf = b.ravel()
    N = bf.size
    bnorm = np.linalg.norm(bf)
    if bnorm == 0.0:
        return np.zeros(shape)
    A = spla.LinearOperator((N, N), matvec=lambda x: matvec(x.reshape(shape)).ravel(), dtype=float)
    inv_diag = 1.0 / diag.ravel()
    P = spla.LinearOperator((N, N), matvec=lambda x: inv_diag * x, dtype=float)
    maxiter = max(1, int(np.ceil(10 * N / restart)))
    x, info = spla.gmres(A, bf, x0=None if x0 is None else x0.ravel(), rtol=tol, atol=0.0, restart=restart, maxiter=maxiter, M=P)
    res = np.linalg.norm(bf - A.matvec(x)) / bnorm
    if info != 0 or res > 10 * tol:
        raise SolverError("transport GMRES did not converge", res)
    return x.reshape(shape)


def solve_rte(system: TransportSystem, q: SourcePair, tol: float = TOL_LIN, restart: int = 60) -> np.ndarray:
    """Solve ``M^(h) c = b(q)`` and return the photon field ``Phi``."""
    system.disc.counts["rte_solves"] += 1
    return _gmres(system.apply, system.rhs(q), system.diagonal, tol, restart)


def solve_rte_weak(system: TransportSystem, b: np.ndarray, tol: float = TOL_LIN, restart: int = 60) -> np.ndarray:
    """Solve with an already-assembled load vector ``b``."""
    system.disc.counts["rte_solves"] += 1
    return _gmres(system.apply, np.asarray(b, float), system.diagonal, tol, restart)


def solve_adjoint_rte(system: TransportSystem, source: np.ndarray, tol: float = TOL_LIN, restart: int = 60) -> np.ndarray:
    """Solve the transposed system ``M^(h)^T c = source``."""
    system.disc.counts["adjoint_solves"] += 1
    return _gmres(system.apply_transpose, np.asarray(source, float), system.diagonal, tol, restart)

"""Free-space 2-D wave propagation from an initial pressure to a detector circle.

The pressure at a detector ``x`` is written through circular means of the
initial pressure,

    p(x, t) = d/dt  int_0^t  M(x, r) r / sqrt(t^2 - r^2) dr,

where ``M(x, r)`` is the mean of ``p0`` over the circle of radius ``r``
around ``x``. The operator is stored in factored form: a sparse
circular-means matrix (one row per detector and radius) followed by a small
dense time kernel shared by all detectors. The inverse square root is
integrated exactly against the piecewise-linear interpolant in ``r``, and
the time derivative is a centered difference over half steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .grid import SIDE_NORMALS, SIDES, SpatialMesh


@dataclass(frozen=True)
class DetectorGeometry:
    """Point detectors on the circle of radius ``R`` and a uniform time grid.

    Detector ``d`` sits at angle ``2 pi (d + 1/2) / n_det``. Samples are at
    ``t_m = m dt`` for ``m = 1 .. n_t`` (``t = 0`` carries zero weight in
    the Y product). ``arcs[side]`` holds the detectors on the half circle
    facing that side of the square.
    """

    R: float = 1.8
    n_det: int = 128
    dt: float = 0.025
    t_max: float = 4.0
    arcs: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.R <= np.sqrt(2.0):
            raise ValueError(f"detector radius R={self.R} must exceed sqrt(2) so the circle encloses the square")
        if self.t_max < 2 * self.R:
            raise ValueError(f"t_max={self.t_max} must be at least 2R={2 * self.R}")
        if self.n_det < 4 or self.n_det % 2:
            raise ValueError("n_det must be an even number >= 4")
        if self.arcs is None:
            ang = self.angles
            arcs = {}
            for name, nu in zip(SIDES, SIDE_NORMALS):
                facing = np.cos(ang) * nu[0] + np.sin(ang) * nu[1] > 0
                arcs[name] = np.flatnonzero(facing)
            object.__setattr__(self, "arcs", arcs)

    @property
    def angles(self) -> np.ndarray:
        return 2.0 * np.pi * (np.arange(self.n_det) + 0.5) / self.n_det

    @property
    def positions(self) -> np.ndarray:
        a = self.angles
        return self.R * np.column_stack([np.cos(a), np.sin(a)])

    @property
    def n_t(self) -> int:
        return int(round(self.t_max / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(1, self.n_t + 1)

    @property
    def ds(self) -> float:
        return 2.0 * np.pi * self.R / self.n_det

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_det, self.n_t)

    def y_weights(self) -> np.ndarray:
        """Quadrature weights ``t dt ds`` of the Y inner product."""
        return np.broadcast_to(self.times * self.dt * self.ds, self.shape).copy()

    def mask(self, arc=None, horizon: float | None = None) -> np.ndarray:
        """Boolean mask of the measured set ``arc x (0, horizon]``.

        ``arc`` is a side name, an index array, or ``None`` for the full circle.
        """
        m = np.zeros(self.shape, dtype=bool)
        if arc is None:
            rows = np.arange(self.n_det)
        elif isinstance(arc, str):
            rows = self.arcs[arc]
        else:
            rows = np.asarray(arc, dtype=int)
        cols = self.times <= (self.t_max if horizon is None else horizon) + 1e-12
        m[np.ix_(rows, cols)] = True
        return m


@dataclass
class PressureData:
    """Detector x time samples together with their measurement mask."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.where(self.mask, self.values, 0.0)


def y_inner(u: np.ndarray, v: np.ndarray, geometry: DetectorGeometry) -> float:
    return float(np.sum(u * v * geometry.y_weights()))


def y_norm(u: np.ndarray, geometry: DetectorGeometry) -> float:
    return np.sqrt(max(y_inner(u, u, geometry), 0.0))


def restrict(v: np.ndarray, geometry: DetectorGeometry, arc=None, horizon: float | None = None) -> np.ndarray:
    """Zero all samples outside ``arc x (0, horizon]``."""
    return np.where(geometry.mask(arc, horizon), v, 0.0)


def _p1_weights(mesh: SpatialMesh, pts: np.ndarray):
    """Node indices and P1 weights for points; points off the square are dropped."""
    h = mesh.h
    n = mesh.n_per_side
    inside = np.all(np.abs(pts) <= 1.0, axis=1)
    keep = np.flatnonzero(inside)
    u = (pts[keep] + 1.0) / h
    ix = np.clip(np.floor(u[:, 0]).astype(np.int64), 0, n - 2)
    iy = np.clip(np.floor(u[:, 1]).astype(np.int64), 0, n - 2)
    xi = u[:, 0] - ix
    eta = u[:, 1] - iy
    n00 = iy * n + ix
    lower = xi >= eta
    nodes = np.column_stack([n00, np.where(lower, n00 + 1, n00 + n + 1), np.where(lower, n00 + n + 1, n00 + n)])
    weights = np.column_stack(
        [np.where(lower, 1 - xi, 1 - eta), np.where(lower, xi - eta, xi), np.where(lower, eta, eta - xi)]
    )
    return keep, nodes, weights


def _abel_kernel(t: np.ndarray, r: np.ndarray) -> np.ndarray:
    """``K[m, k] = int_0^{t_m} r phi_k(r) / sqrt(t_m^2 - r^2) dr`` for hat functions ``phi_k``."""
    dr = r[1] - r[0]
    T = t[:, None]
    a = np.minimum(r[None, :-1], T)
    b = np.minimum(r[None, 1:], T)

    def F2(x):
        s = np.sqrt(np.maximum(T * T - x * x, 0.0))
        ratio = np.divide(x, T, out=np.zeros_like(x), where=T > 0)
        return 0.5 * T * T * np.arcsin(np.clip(ratio, -1.0, 1.0)) - 0.5 * x * s

    I1 = np.sqrt(np.maximum(T * T - a * a, 0.0)) - np.sqrt(np.maximum(T * T - b * b, 0.0))
    I2 = F2(b) - F2(a)
    K = np.zeros((t.size, r.size))
    K[:, :-1] += (r[None, 1:] * I1 - I2) / dr
    K[:, 1:] += (I2 - r[None, :-1] * I1) / dr
    return K


class WaveOperator:
    """Discrete full-circle trace operator ``U`` for a mesh and detector geometry.

    Parameters
    ----------
    mesh : SpatialMesh
        Nodal P1 initial pressures live on this mesh.
    geometry : DetectorGeometry
    dr : float, optional
        Radial spacing of the circular means; defaults to ``h / 2``.
    arc_spacing : float, optional
        Sampling distance along each circle; defaults to ``h / 4``.
    """

    def __init__(self, mesh: SpatialMesh, geometry: DetectorGeometry, dr: float | None = None, arc_spacing: float | None = None):
        self.mesh = mesh
        self.geometry = geometry
        self.mass = mesh.lumped_mass()
        self.dr = mesh.h / 2 if dr is None else dr
        spacing = mesh.h / 4 if arc_spacing is None else arc_spacing
        R = geometry.R
        r_max = min(geometry.t_max + geometry.dt, R + np.sqrt(2.0))
        self.radii = self.dr * np.arange(int(np.ceil(r_max / self.dr)) + 2)
        n_r = self.radii.size
        self.n_r = n_r

        rows, cols, vals = [], [], []
        for d, (xd, ang) in enumerate(zip(geometry.positions, geometry.angles)):
            for k, r in enumerate(self.radii):
                if r <= R - np.sqrt(2.0):
                    continue
                c = (R * R + r * r - 2.0) / (2.0 * r * R)
                if c >= 1.0:
                    continue
                beta = np.arccos(max(c, -1.0))
                m = max(2, int(np.ceil(2 * beta * r / spacing)))
                phi = ang + np.pi - beta + (2 * beta / m) * (np.arange(m) + 0.5)
                pts = xd + r * np.column_stack([np.cos(phi), np.sin(phi)])
                keep, nodes, w = _p1_weights(mesh, pts)
                if keep.size == 0:
                    continue
                rows.append(np.full(nodes.size, d * n_r + k))
                cols.append(nodes.ravel())
                vals.append((w * (2 * beta / m) / (2 * np.pi)).ravel())
        self.C = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(geometry.n_det * n_r, mesh.n_nodes),
        ).tocsr()
        self.CT = self.C.T.tocsr()

        t = geometry.times
        half = geometry.dt / 2
        self.Kd = (_abel_kernel(t + half, self.radii) - _abel_kernel(t - half, self.radii)) / geometry.dt
        self._yw = geometry.y_weights()

    @property
    def shape(self) -> tuple[int, int]:
        return (self.geometry.n_det * self.geometry.n_t, self.mesh.n_nodes)

    def forward(self, p0: np.ndarray) -> np.ndarray:
        """Full-circle trace, shape ``(n_det, n_t)``."""
        p0 = np.asarray(p0, dtype=float)
        if p0.shape != (self.mesh.n_nodes,):
            raise ValueError(f"initial pressure has shape {p0.shape}, expected ({self.mesh.n_nodes},)")
        means = (self.C @ p0).reshape(self.geometry.n_det, self.n_r)
        return means @ self.Kd.T

    def transpose(self, v: np.ndarray) -> np.ndarray:
        """Euclidean transpose of :meth:`forward`."""
        v = np.asarray(v, dtype=float)
        return self.CT @ (v @ self.Kd).ravel()

    def adjoint(self, v: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """Adjoint for the Y product on data and the lumped L2 product on fields."""
        v = np.asarray(v, dtype=float)
        if mask is not None:
            v = np.where(mask, v, 0.0)
        return self.transpose(v * self._yw) / self.mass


def solve_wave(p0: np.ndarray, op: WaveOperator) -> np.ndarray:
    return op.forward(p0)


def wave_adjoint(v: np.ndarray, op: WaveOperator, mask: np.ndarray | None = None) -> np.ndarray:
    return op.adjoint(v, mask)


def isometry_check(p0: np.ndarray, op: WaveOperator) -> float:
    """Ratio ``||U p0||_Y^2 / ||p0||_L2^2``; close to ``R/2`` for smooth ``p0``.

    Returns ``nan`` for ``p0 = 0``.
    """
    den = float(np.sum(op.mass * np.asarray(p0, float) ** 2))
    if den == 0.0:
        return float("nan")
    v = op.forward(p0)
    return y_inner(v, v, op.geometry) / den

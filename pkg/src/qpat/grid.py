"""Spatial and angular discretization of the unit-square transport domain.

The spatial domain is the square ``[-1, 1]^2`` (cm), triangulated uniformly.
Nodes are ordered lexicographically, y-major and x-minor, so a nodal field
reshapes to ``(ny, nx)`` with row 0 at ``y = -1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: Side names in a fixed order, with their outward unit normals.
SIDES = ("top", "right", "bottom", "left")
SIDE_NORMALS = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, -1.0], [-1.0, 0.0]])


@dataclass(frozen=True)
class SpatialMesh:
    """Uniform P1 triangulation of ``[-1, 1]^2``.

    Attributes
    ----------
    h : float
        Mesh size in cm.
    nodes : ndarray, shape (n_nodes, 2)
    triangles : ndarray, shape (n_triangles, 3)
        Node indices, counterclockwise.
    boundary_nodes : ndarray of int
        Indices of nodes on the boundary of the square.
    normals : ndarray, shape (n_boundary, 2)
        Unit outward normal at each boundary node. Corners get the
        normalized diagonal (e.g. ``(1, 1)/sqrt(2)``).
    side_tags : ndarray of bool, shape (n_nodes, 4)
        ``side_tags[n, s]`` is true if node ``n`` lies on side ``SIDES[s]``.
        Corners are on both adjacent sides.
    edges : tuple of ndarray
        Per side, the boundary edges as ``(n_edges, 2)`` node-index pairs.
    """

    h: float
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_nodes: np.ndarray
    normals: np.ndarray
    side_tags: np.ndarray
    edges: tuple = field(repr=False)

    @property
    def n_per_side(self) -> int:
        return int(round(2.0 / self.h)) + 1

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        """Nodal grid shape ``(ny, nx)``."""
        n = self.n_per_side
        return (n, n)

    def triangle_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def lumped_mass(self) -> np.ndarray:
        """Nodal weights ``sum_T |T|/3``; they sum to the area 4."""
        m = np.zeros(self.n_nodes)
        np.add.at(m, self.triangles.ravel(), np.repeat(self.triangle_areas() / 3.0, 3))
        return m

    def interior_mask(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return mask


@dataclass(frozen=True)
class AngularGrid:
    """Equispaced directions on the unit circle with uniform weights."""

    n_theta: int
    phi: np.ndarray
    directions: np.ndarray
    weight: float

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n_theta, self.weight)

    def nearest(self, direction) -> int:
        """Index of the grid direction closest to ``direction``."""
        d = np.asarray(direction, dtype=float)
        return int(np.argmax(self.directions @ d))


@dataclass(frozen=True)
class BoundaryClassification:
    """Inflow/outflow split of boundary-node x direction pairs.

    ``inflow[b, j]`` refers to ``mesh.boundary_nodes[b]`` and direction ``j``;
    ``side_inflow[s, j]`` is the same test for the straight side ``s``, which
    is what the edge integrals use.
    """

    boundary_nodes: np.ndarray
    inflow: np.ndarray
    side_inflow: np.ndarray

    @property
    def outflow(self) -> np.ndarray:
        return ~self.inflow


def build_mesh(h: float) -> SpatialMesh:
    """Uniform triangulation of ``[-1, 1]^2`` with mesh size ``h``.

    Raises
    ------
    ValueError
        If ``2/h`` is not a positive integer.
    """
    if not h > 0:
        raise ValueError(f"mesh size must be positive, got h={h!r}")
    ratio = 2.0 / h
    n_cells = int(round(ratio))
    if n_cells < 1 or abs(ratio - n_cells) > 1e-9 * max(1.0, ratio):
        raise ValueError(f"mesh size h={h!r} does not divide the side length 2 (2/h={ratio:.6g})")
    h = 2.0 / n_cells
    n = n_cells + 1
    coords = -1.0 + h * np.arange(n)
    coords[-1] = 1.0
    xx, yy = np.meshgrid(coords, coords)
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    ix, iy = np.meshgrid(np.arange(n_cells), np.arange(n_cells))
    n00 = (iy * n + ix).ravel()
    n10 = n00 + 1
    n01 = n00 + n
    n11 = n01 + 1
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    triangles = np.empty((2 * n00.size, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    idx = np.arange(n * n).reshape(n, n)
    side_nodes = (idx[-1, :], idx[:, -1], idx[0, :], idx[:, 0])
    side_tags = np.zeros((n * n, 4), dtype=bool)
    for s, ids in enumerate(side_nodes):
        side_tags[ids, s] = True
    edges = tuple(np.column_stack([ids[:-1], ids[1:]]) for ids in side_nodes)

    boundary_nodes = np.flatnonzero(side_tags.any(axis=1))
    normals = side_tags[boundary_nodes].astype(float) @ SIDE_NORMALS
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    return SpatialMesh(
        h=h,
        nodes=nodes,
        triangles=triangles,
        boundary_nodes=boundary_nodes,
        normals=normals,
        side_tags=side_tags,
        edges=edges,
    )


def build_angles(n_theta: int) -> AngularGrid:
    """Directions ``(cos phi_j, sin phi_j)`` with ``phi_j = 2 pi j / n_theta``."""
    if int(n_theta) != n_theta or n_theta < 4:
        raise ValueError(f"n_theta must be an integer >= 4, got {n_theta!r}")
    n_theta = int(n_theta)
    phi = 2.0 * np.pi * np.arange(n_theta) / n_theta
    directions = np.column_stack([np.cos(phi), np.sin(phi)])
    # exact zeros on the axes keep tangency tests (nu . theta == 0) clean
    directions[np.abs(directions) < 1e-15] = 0.0
    return AngularGrid(n_theta=n_theta, phi=phi, directions=directions, weight=2.0 * np.pi / n_theta)


def classify_boundary(mesh: SpatialMesh, angles: AngularGrid) -> BoundaryClassification:
    """Split boundary pairs by the sign of ``nu . theta`` (tangent counts as inflow)."""
    dots = mesh.normals @ angles.directions.T
    side_dots = SIDE_NORMALS @ angles.directions.T
    return BoundaryClassification(
        boundary_nodes=mesh.boundary_nodes,
        inflow=dots <= 0.0,
        side_inflow=side_dots <= 0.0,
    )

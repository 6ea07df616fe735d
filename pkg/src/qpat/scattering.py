"""Henyey-Greenstein scattering in two dimensions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import AngularGrid


@dataclass(frozen=True)
class ScatteringKernel:
    """Discrete scattering operator on an angular grid.

    ``matrix[j, l]`` approximates ``k(theta_j, theta_l) * w_l``; rows are
    renormalized to sum to one, so direction-constant fields are invariant.
    """

    g: float
    matrix: np.ndarray

    @property
    def n_theta(self) -> int:
        return self.matrix.shape[0]


def _check_g(g: float) -> None:
    if not abs(g) < 1.0:
        raise ValueError(f"anisotropy factor must satisfy |g| < 1, got g={g!r}")


def hg_value(theta, theta_prime, g: float):
    """Two-dimensional Henyey-Greenstein density.

    ``(1/2pi) (1 - g^2) / (1 + g^2 - 2 g cos)``, where ``cos`` is the
    cosine of the angle between the unit vectors ``theta`` and
    ``theta_prime`` (their dot product). Broadcasts over leading axes.
    """
    _check_g(g)
    cos = np.sum(np.asarray(theta, float) * np.asarray(theta_prime, float), axis=-1)
    return (1.0 - g * g) / (2.0 * np.pi * (1.0 + g * g - 2.0 * g * cos))


def build_kernel(angles: AngularGrid, g: float) -> ScatteringKernel:
    dirs = angles.directions
    raw = hg_value(dirs[:, None, :], dirs[None, :, :], g) * angles.weight
    matrix = raw / raw.sum(axis=1, keepdims=True)
    return ScatteringKernel(g=float(g), matrix=matrix)


def apply_K(kernel: ScatteringKernel, phi: np.ndarray) -> np.ndarray:
    """Apply the scattering operator to a node x direction field."""
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 2 or phi.shape[1] != kernel.n_theta:
        raise ValueError(
            f"photon field has shape {phi.shape}, expected (n_nodes, {kernel.n_theta})"
        )
    return phi @ kernel.matrix.T

"""Per-iteration records shared by all reconstruction algorithms."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
import math

import numpy as np

TRACE_COLUMNS = (
    "iter",
    "picked_i",
    "picked_l",
    "objective",
    "fidelity",
    "penalty",
    "rel_err_mu_a",
    "rel_err_mu_s",
    "rte_solves",
    "applyM_count",
    "wall_s",
)


def relative_error(estimate: np.ndarray, truth: np.ndarray, mass: np.ndarray | None = None) -> float:
    """``||estimate - truth|| / ||truth||`` in the (lumped) discrete L2 norm."""
    w = np.ones_like(truth) if mass is None else mass
    den = math.sqrt(float(np.sum(w * truth**2)))
    if den == 0.0:
        return float("nan")
    return math.sqrt(float(np.sum(w * (estimate - truth) ** 2))) / den


@dataclass
class IterateTrace:
    """Rows of per-iteration diagnostics, written as CSV with fixed columns.

    ``picked_i`` holds the illumination indices used in the step joined by
    ``";"``; ``picked_l`` the functional index for the multilinear
    algorithms (empty otherwise).
    """

    rows: list = field(default_factory=list)
    status: str = "running"

    def append(self, **values) -> None:
        unknown = set(values) - set(TRACE_COLUMNS)
        if unknown:
            raise KeyError(f"unknown trace columns: {sorted(unknown)}")
        self.rows.append({c: values.get(c, "") for c in TRACE_COLUMNS})

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] == "" else float(r[name]) for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows)

    @classmethod
    def from_csv(cls, path) -> "IterateTrace":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
                raise ValueError(f"{path}: unexpected trace columns {reader.fieldnames}")
            return cls(rows=list(reader))


def solve_counts(counts) -> dict:
    return {
        "rte_solves": counts.get("rte_solves", 0) + counts.get("adjoint_solves", 0),
        "applyM_count": counts.get("apply_M", 0) + counts.get("apply_MT", 0),
    }

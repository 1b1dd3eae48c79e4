"""Nodal P1 coefficient fields over a mesh."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ScalarField:
    mesh: object
    values: np.ndarray            # (N_v,)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_nodes,):
            raise ValueError(
                f"scalar field length {self.values.shape} != mesh nodes "
                f"({self.mesh.n_nodes},)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("scalar field has non-finite values")


@dataclass
class VectorField:
    mesh: object
    values: np.ndarray            # (N_v, 2)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_nodes, 2):
            raise ValueError(
                f"vector field shape {self.values.shape} != ({self.mesh.n_nodes}, 2)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("vector field has non-finite values")

    @property
    def flat(self):
        """Interleaved dof vector (x0, y0, x1, y1, ...)."""
        return self.values.ravel()

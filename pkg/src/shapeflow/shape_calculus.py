"""Objective evaluation and assembly of the stochastic shape derivative.

The volume (weak) form of the derivative of the tracking functional is
assembled against vector P1 test fields:

    dJ[W] = 1/2 int div(W) (y - ybar)^2
          - int (y - ybar) grad(ybar) . W
          + int kappa (div(W) I - DW - DW^T) grad(y) . grad(p)

plus, for the perimeter term, the tangential-divergence form
dJreg[W] = sum_segments (W(b) - W(a)) . tau, which is exact for P1 fields
on polylines.  All (y - ybar)^2 integrals use the order-2 edge-midpoint
rule, which is exact for products of P1 functions; the kappa term is exact
(all factors constant per triangle).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import fem
from .errors import ConfigurationError
from .fields import ScalarField
from .mesh import apply_displacement, mesh_quality

log = logging.getLogger(__name__)

__all__ = [
    "ShapeDerivative",
    "objective_value",
    "tracking_misfit",
    "perimeter",
    "assemble_volume_derivative",
    "assemble_perimeter_derivative",
    "apply_restriction",
    "fd_check",
    "FdRow",
    "write_fd_csv",
]


@dataclass
class ShapeDerivative:
    """Linear functional dJ[.] on vector P1 fields, as an rhs vector.

    ``rhs`` is interleaved (x0, y0, x1, y1, ...); rows of boundary nodes
    are zero (H^1_0 test space), and rows outside ``active`` are zero when
    a restriction has been applied.
    """

    mesh: object
    rhs: np.ndarray              # (2 N_v,)
    active: np.ndarray = None    # (N_v,) bool or None for "all interior"

    def __add__(self, other):
        if other.mesh is not self.mesh:
            raise ValueError("cannot add derivatives on different meshes")
        return ShapeDerivative(self.mesh, self.rhs + other.rhs, None)

    def apply(self, V):
        """Evaluate the functional at a vector field."""
        return float(self.rhs @ np.asarray(getattr(V, "flat", V)).ravel())


def _zero_boundary_rows(mesh, rhs):
    idx = mesh.boundary_node_set
    rhs[2 * idx] = 0.0
    rhs[2 * idx + 1] = 0.0


def perimeter(mesh):
    """Total interface length (the regularizer Jreg)."""
    return float(sum(lp.segment_lengths(mesh.nodes).sum() for lp in mesh.loops))


def _midpoint_values(mesh, nodal):
    """Values of a P1 field at the three edge midpoints of each triangle."""
    v = nodal[mesh.triangles]                    # (Nt, 3)
    return 0.5 * (v + np.roll(v, -1, axis=1))    # midpoints (12, 23, 31)


def tracking_misfit(mesh, y, ybar_eval):
    """1/2 int (y - ybar)^2 dx, order-2 quadrature (exact for P1 fields)."""
    q = _midpoint_values(mesh, y.values - ybar_eval.values)
    areas = mesh.signed_areas
    return float(0.5 * np.sum(areas / 3.0 * (q ** 2).sum(axis=1)))


def objective_value(mesh, scenario, ybar, nu, source=None, system=None):
    """J = Jobj + nu * Jreg at one scenario; solves the state internally.

    ``ybar`` may live on a different (fixed reference) mesh; it is then
    interpolated onto ``mesh``.
    """
    if nu < 0:
        raise ConfigurationError("nu must be nonnegative")
    y = fem.solve_state(mesh, scenario, source=source, system=system)
    ybar_eval = fem.evaluate_on_mesh(ybar, mesh)
    jobj = tracking_misfit(mesh, y, ybar_eval)
    jreg = perimeter(mesh)
    return jobj + nu * jreg, jobj, jreg


def assemble_volume_derivative(mesh, scenario, y, p, ybar_eval, grad_ybar):
    """Volume form of dJobj as an rhs over vector P1 test functions.

    ``grad_ybar`` holds one gradient vector per triangle (the reference
    field's piecewise-constant gradient at the triangle centroids).
    """
    ops_grads = fem.triangle_gradients(mesh)             # (Nt, 3, 2)
    areas = mesh.signed_areas
    tri = mesh.triangles
    kappa = scenario.kappa_per_triangle(mesh)
    gy = fem.field_gradients(y)                          # (Nt, 2)
    gp = fem.field_gradients(p)
    grad_ybar = np.asarray(grad_ybar, dtype=float)

    q = _midpoint_values(mesh, y.values - ybar_eval.values)   # (Nt, 3)
    q2int = areas / 3.0 * (q ** 2).sum(axis=1)                # int_T q^2

    gygp = np.einsum("td,td->t", gy, gp)
    gly = np.einsum("tld,td->tl", ops_grads, gy)              # G_l . grad y
    glp = np.einsum("tld,td->tl", ops_grads, gp)

    # kappa (div W I - DW - DW^T) grad y . grad p, exact per triangle
    ak = (areas * kappa)
    term3 = (ak * gygp)[:, None, None] * ops_grads \
        - ak[:, None, None] * (gly[:, :, None] * gp[:, None, :]) \
        - ak[:, None, None] * (glp[:, :, None] * gy[:, None, :])

    # 1/2 div(W) (y - ybar)^2
    term1 = 0.5 * q2int[:, None, None] * ops_grads

    # -(y - ybar) grad(ybar) . W ; int_T q phi_l = A/6 (q at the two
    # midpoints adjacent to vertex l)
    qadj = np.stack([q[:, 0] + q[:, 2], q[:, 0] + q[:, 1], q[:, 1] + q[:, 2]], axis=1)
    term2 = -(areas / 6.0)[:, None, None] * qadj[:, :, None] * grad_ybar[:, None, :]

    contrib = term1 + term2 + term3                           # (Nt, 3, 2)
    rhs = np.zeros(2 * mesh.n_nodes)
    for l in range(3):
        np.add.at(rhs, 2 * tri[:, l], contrib[:, l, 0])
        np.add.at(rhs, 2 * tri[:, l] + 1, contrib[:, l, 1])
    _zero_boundary_rows(mesh, rhs)
    return ShapeDerivative(mesh, rhs)


def assemble_perimeter_derivative(mesh, nu):
    """nu * dJreg[W] via the tangential divergence over each closed loop."""
    if nu < 0:
        raise ConfigurationError("nu must be nonnegative")
    rhs = np.zeros(2 * mesh.n_nodes)
    for lp in mesh.loops:
        pts = mesh.nodes[lp.nodes]
        d = np.roll(pts, -1, axis=0) - pts
        tau = d / np.linalg.norm(d, axis=1)[:, None]
        a = lp.nodes
        b = np.roll(lp.nodes, -1)
        for c in (0, 1):
            np.add.at(rhs, 2 * b + c, nu * tau[:, c])
            np.add.at(rhs, 2 * a + c, -nu * tau[:, c])
    _zero_boundary_rows(mesh, rhs)
    return ShapeDerivative(mesh, rhs)


def apply_restriction(d, mode="none", k=0):
    """Restrict the test space to a band of nodes around the interface.

    ``interface_band`` keeps nodes within ``k`` mesh edges of an interface
    node (k=0: interface nodes only); all other rows are zeroed.
    """
    if mode == "none":
        return d
    if mode != "interface_band":
        raise ConfigurationError(f"unknown restriction mode {mode!r}")
    if k < 0:
        raise ConfigurationError("band width k must be nonnegative")
    mesh = d.mesh
    active = np.zeros(mesh.n_nodes, dtype=bool)
    active[mesh.interface_node_set] = True
    if k > 0:
        tri = mesh.triangles
        for _ in range(k):
            touch = active[tri].any(axis=1)
            grow = active.copy()
            grow[tri[touch].ravel()] = True
            active = grow
    rhs = d.rhs.copy()
    off = ~active
    rhs[2 * np.nonzero(off)[0]] = 0.0
    rhs[2 * np.nonzero(off)[0] + 1] = 0.0
    _zero_boundary_rows(mesh, rhs)
    return ShapeDerivative(mesh, rhs, active)


@dataclass
class FdRow:
    t: float
    quotient: float
    assembled: float
    abs_err: float
    rel_err: float
    quotient_central: float = float("nan")
    valid: bool = True


def fd_check(mesh, scenario, V, t_values, ybar, nu):
    """Compare assembled dJ[V] against finite-difference quotients of J.

    One-sided quotients (J(u + tV) - J(u))/t match the defining limit;
    central quotients are carried along for diagnostics.  The assembled
    value uses the unrestricted volume form plus the perimeter term.
    """
    base_J, _, _ = objective_value(mesh, scenario, ybar, nu)
    system = fem.NeumannSystem(mesh, scenario)
    y = fem.solve_state(mesh, scenario, system=system)
    ybar_eval = fem.evaluate_on_mesh(ybar, mesh)
    p = fem.solve_adjoint(mesh, scenario, y, ybar_eval, system=system)
    grad_ybar = fem.gradient_at_points(ybar, fem._ops(mesh)["centroids"])
    d = assemble_volume_derivative(mesh, scenario, y, p, ybar_eval, grad_ybar)
    d = d + assemble_perimeter_derivative(mesh, nu)
    assembled = d.apply(V)

    rows = []
    for t in t_values:
        try:
            mplus = apply_displacement(mesh, V, t)
            if not mesh_quality(mplus).valid:
                rows.append(FdRow(t, float("nan"), assembled, float("nan"),
                                  float("nan"), valid=False))
                continue
            Jp, _, _ = objective_value(mplus, scenario, ybar, nu)
            quot = (Jp - base_J) / t
            mminus = apply_displacement(mesh, V, -t)
            central = float("nan")
            if mesh_quality(mminus).valid:
                Jm, _, _ = objective_value(mminus, scenario, ybar, nu)
                central = (Jp - Jm) / (2.0 * t)
        except Exception as exc:        # keep scanning other step sizes
            log.warning("fd_check failed at t=%g: %s", t, exc)
            rows.append(FdRow(t, float("nan"), assembled, float("nan"),
                              float("nan"), valid=False))
            continue
        abs_err = abs(quot - assembled)
        rel_err = abs_err / max(abs(assembled), 1e-300)
        rows.append(FdRow(t, quot, assembled, abs_err, rel_err, central))
    return rows


def write_fd_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "quotient", "assembled", "abs_err", "rel_err"])
        for r in rows:
            w.writerow([f"{r.t:.17g}", f"{r.quotient:.17g}", f"{r.assembled:.17g}",
                        f"{r.abs_err:.17g}", f"{r.rel_err:.17g}"])

"""P1 finite elements for the random-coefficient Neumann problem.

State and adjoint solves use the zero-mean (H^1_av) formulation: the pure
Neumann stiffness is augmented with one Lagrange multiplier against the
consistent domain weights, which also absorbs incompatible boundary data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .errors import ConfigurationError, EvaluationError, NumericalError
from .fields import ScalarField, VectorField

log = logging.getLogger(__name__)

__all__ = [
    "Scenario",
    "NeumannSystem",
    "assemble_state_system",
    "solve_zero_mean",
    "solve_state",
    "solve_adjoint",
    "evaluate_on_mesh",
    "gradient_at_points",
    "h1_norm",
    "save_field",
    "load_field",
]

_GAUSS2 = (0.5 * (1.0 - 1.0 / np.sqrt(3.0)), 0.5 * (1.0 + 1.0 / np.sqrt(3.0)))


@dataclass
class Scenario:
    """One realization of the random inputs.

    ``kappa`` maps region labels to positive conductivities; ``g`` is the
    Neumann flux, either one constant or one value per boundary edge.
    """

    kappa: dict
    g: object = 0.0

    def kappa_per_triangle(self, mesh):
        out = np.empty(mesh.n_triangles)
        for i, name in enumerate(mesh.region_names):
            if name not in self.kappa:
                raise ConfigurationError(f"scenario missing kappa for region {name!r}")
            out[mesh.regions == i] = float(self.kappa[name])
        if np.any(out <= 0):
            raise ConfigurationError("kappa values must be positive")
        return out


# ---------------------------------------------------------------------------
# per-mesh geometric cache


def _ops(mesh):
    """Per-mesh P1 operators, cached on the (immutable) mesh object."""
    cache = mesh.__dict__.get("_fem_ops")
    if cache is not None:
        return cache

    tri = mesh.triangles
    p = mesh.nodes[tri]                               # (Nt, 3, 2)
    areas = mesh.signed_areas
    # grad of basis l = perp of the opposite edge (CCW) / (2A)
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    grads = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2.0 * areas)[:, None, None]

    rows = np.repeat(tri, 3, axis=1).ravel()          # i index of K_ij blocks
    cols = np.tile(tri, (1, 3)).ravel()

    stiff_blocks = np.einsum("tld,tmd->tlm", grads, grads) * areas[:, None, None]
    n = mesh.n_nodes
    stiff_unit = sp.coo_matrix(
        (stiff_blocks.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    mloc = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    mass_blocks = mloc[None, :, :] * areas[:, None, None]
    mass = sp.coo_matrix((mass_blocks.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    weights = np.zeros(n)
    np.add.at(weights, tri.ravel(), np.repeat(areas / 3.0, 3))

    cache = {
        "areas": areas,
        "grads": grads,
        "rows": rows,
        "cols": cols,
        "stiff_blocks": stiff_blocks,
        "stiff_unit": stiff_unit,
        "mass": mass,
        "weights": weights,
        "centroids": mesh.nodes[tri].mean(axis=1),
    }
    mesh.__dict__["_fem_ops"] = cache
    return cache


def unit_stiffness(mesh):
    return _ops(mesh)["stiff_unit"]


def mass_matrix(mesh):
    return _ops(mesh)["mass"]


def domain_weights(mesh):
    """Consistent mass-lumped weights m_i = integral of basis i."""
    return _ops(mesh)["weights"]


def triangle_gradients(mesh):
    """P1 basis gradients, shape (N_t, 3, 2)."""
    return _ops(mesh)["grads"]


def field_gradients(field):
    """Piecewise-constant gradient of a P1 field, shape (N_t, 2)."""
    ops = _ops(field.mesh)
    vals = field.values[field.mesh.triangles]         # (Nt, 3)
    return np.einsum("tl,tld->td", vals, ops["grads"])


# ---------------------------------------------------------------------------
# assembly


def assemble_state_system(mesh, scenario, source=None):
    """Stiffness K_ij = sum_T kappa_T int_T grad(phi_i).grad(phi_j) and the
    boundary load b_i = int_{dD} g phi_i ds (2-point Gauss per edge).

    ``source`` optionally adds a manufactured volume term int_D f phi_i dx
    (order-2 triangle rule); used by convergence tests only.
    """
    ops = _ops(mesh)
    kappa = scenario.kappa_per_triangle(mesh)
    n = mesh.n_nodes
    data = (ops["stiff_blocks"] * kappa[:, None, None]).ravel()
    K = sp.coo_matrix((data, (ops["rows"], ops["cols"])), shape=(n, n)).tocsr()

    b = np.zeros(n)
    edges = mesh.boundary_edges
    if len(edges):
        pa, pb = mesh.nodes[edges[:, 0]], mesh.nodes[edges[:, 1]]
        lens = np.linalg.norm(pb - pa, axis=1)
        g = scenario.g
        if np.isscalar(g):
            gvals = np.full(len(edges), float(g))
        else:
            gvals = np.asarray(g, dtype=float)
            if gvals.shape != (len(edges),):
                raise ConfigurationError(
                    f"per-edge g needs {len(edges)} values, got {gvals.shape}")
        for s in _GAUSS2:
            w = 0.5 * lens * gvals
            np.add.at(b, edges[:, 0], w * (1.0 - s))
            np.add.at(b, edges[:, 1], w * s)

    if source is not None:
        tri = mesh.triangles
        p = mesh.nodes[tri]
        mids = 0.5 * (p + np.roll(p, -1, axis=1))     # edge midpoints (12, 23, 31)
        fv = source(mids[..., 0], mids[..., 1])       # (Nt, 3)
        w = ops["areas"][:, None] / 6.0
        # phi_l = 1/2 on the two midpoints adjacent to vertex l
        for l, (m1, m2) in enumerate(((0, 2), (0, 1), (1, 2))):
            np.add.at(b, tri[:, l], (w[:, 0] * (fv[:, m1] + fv[:, m2])))
    return K, b


def solve_zero_mean(K, b, weights):
    """Solve the augmented saddle system [K, m; m^T, 0] [y; lam] = [b; 0].

    K is the singular pure-Neumann stiffness (kernel = constants); the
    multiplier pins the weighted mean and absorbs incompatible data.
    """
    n = K.shape[0]
    m = sp.csr_matrix(weights.reshape(1, -1))
    aug = sp.bmat([[K, m.T], [m, None]], format="csc")
    rhs = np.concatenate([b, [0.0]])
    try:
        sol = spla.spsolve(aug, rhs)
        ok = np.all(np.isfinite(sol))
    except RuntimeError:
        ok = False
        sol = None
    if ok:
        res = np.linalg.norm(aug @ sol - rhs)
        ok = res <= 1e-9 * max(1.0, np.linalg.norm(rhs))
    if not ok:
        sol, info = spla.minres(aug, rhs, rtol=1e-10, maxiter=50 * (n + 1))
        res = np.linalg.norm(aug @ sol - rhs)
        if info != 0 or res > 1e-8 * max(1.0, np.linalg.norm(rhs)):
            raise NumericalError(
                f"zero-mean solve failed (minres info={info}, residual={res:.3e})")
    y = sol[:n]
    # exact projection of the weighted mean (removes solver roundoff)
    y = y - (weights @ y) / weights.sum()
    return y


class NeumannSystem:
    """Factorized zero-mean Neumann operator for one (mesh, scenario) pair.

    Shares one LU factorization between the state and adjoint solves.
    """

    def __init__(self, mesh, scenario, source=None):
        self.mesh = mesh
        self.scenario = scenario
        self.K, self.load = assemble_state_system(mesh, scenario, source=source)
        self.weights = domain_weights(mesh)
        m = sp.csr_matrix(self.weights.reshape(1, -1))
        aug = sp.bmat([[self.K, m.T], [m, None]], format="csc")
        self._aug = aug
        try:
            self._lu = spla.splu(aug)
        except RuntimeError as exc:
            raise NumericalError(f"factorization failed: {exc}")

    def solve(self, b):
        rhs = np.concatenate([b, [0.0]])
        sol = self._lu.solve(rhs)
        res = np.linalg.norm(self._aug @ sol - rhs)
        if not np.all(np.isfinite(sol)) or res > 1e-8 * max(1.0, np.linalg.norm(rhs)):
            return solve_zero_mean(self.K, b, self.weights)
        y = sol[:-1]
        return y - (self.weights @ y) / self.weights.sum()


def solve_state(mesh, scenario, source=None, system=None):
    """Zero-mean state solution of the two-material Neumann problem."""
    if system is None:
        system = NeumannSystem(mesh, scenario, source=source)
    y = system.solve(system.load)
    fld = ScalarField(mesh, y)
    if log.isEnabledFor(logging.DEBUG):
        log.debug("state solve: |y|_H1 = %.6e", h1_norm(fld))
    return fld


def solve_adjoint(mesh, scenario, y, ybar, system=None):
    """Adjoint solve: int kappa grad(phi).grad(p) = -int (y - ybar) phi."""
    if system is None:
        system = NeumannSystem(mesh, scenario)
    rhs = -(mass_matrix(mesh) @ (y.values - ybar.values))
    return ScalarField(mesh, system.solve(rhs))


def h1_norm(fld):
    ops = _ops(fld.mesh)
    v = fld.values
    return float(np.sqrt(v @ (ops["stiff_unit"] @ v) + v @ (ops["mass"] @ v)))


# ---------------------------------------------------------------------------
# point location / inter-mesh transfer


class _Locator:
    def __init__(self, mesh):
        self.mesh = mesh
        ops = _ops(mesh)
        self.tree = cKDTree(ops["centroids"])
        p = mesh.nodes[mesh.triangles]
        self.origin = p[:, 0]
        col = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
        self.inv = np.linalg.inv(col)
        bbox = mesh.nodes.max(axis=0) - mesh.nodes.min(axis=0)
        self.tol = 1e-10 * max(bbox)

    def _bary(self, pts, tris):
        d = pts - self.origin[tris]
        lm = np.einsum("nij,nj->ni", self.inv[tris], d)
        return np.concatenate([(1.0 - lm.sum(axis=1))[:, None], lm], axis=1)

    def locate(self, pts):
        pts = np.asarray(pts, dtype=float)
        npts = len(pts)
        k = min(12, self.mesh.n_triangles)
        _, cand = self.tree.query(pts, k=k)
        cand = cand.reshape(npts, k)
        found = np.full(npts, -1, dtype=np.int64)
        bary = np.zeros((npts, 3))
        pending = np.arange(npts)
        for j in range(k):
            if not len(pending):
                break
            lam = self._bary(pts[pending], cand[pending, j])
            ok = lam.min(axis=1) >= -1e-12
            hit = pending[ok]
            found[hit] = cand[hit, j]
            bary[hit] = lam[ok]
            pending = pending[~ok]
        if len(pending):
            # brute force: best triangle by max min-barycentric coordinate
            for i in pending:
                lam = self._bary(np.repeat(pts[i][None], self.mesh.n_triangles, axis=0),
                                 np.arange(self.mesh.n_triangles))
                best = int(np.argmax(lam.min(axis=1)))
                lmin = lam[best].min()
                if lmin < -self.tol / max(np.abs(self.inv[best]).max(), 1.0) - 1e-9:
                    raise EvaluationError(
                        f"point {pts[i]} lies outside the source mesh "
                        f"(barycentric deficit {lmin:.3e})")
                found[i] = best
                bary[i] = np.clip(lam[best], 0.0, None)
                bary[i] /= bary[i].sum()
        return found, bary


def _locator(mesh):
    loc = mesh.__dict__.get("_point_locator")
    if loc is None:
        loc = _Locator(mesh)
        mesh.__dict__["_point_locator"] = loc
    return loc


def evaluate_at_points(field, pts):
    """P1 interpolation of ``field`` at arbitrary points of its mesh domain."""
    tris, bary = _locator(field.mesh).locate(pts)
    vals = field.values[field.mesh.triangles[tris]]
    return np.einsum("nl,nl->n", vals, bary)


def evaluate_on_mesh(field, target):
    """Interpolate a field from its own mesh onto the nodes of ``target``."""
    if field.mesh is target:
        return field
    return ScalarField(target, evaluate_at_points(field, target.nodes))


def gradient_at_points(field, pts):
    """Piecewise-constant source-mesh gradient of ``field`` at points."""
    tris, _ = _locator(field.mesh).locate(pts)
    return field_gradients(field)[tris]


# ---------------------------------------------------------------------------
# field files


def save_field(fld, path):
    with open(path, "w") as f:
        f.write("# shapeflow field v1\n")
        f.write(f"{len(fld.values)}\n")
        for v in fld.values:
            f.write(f"{v:.17g}\n")


def load_field(mesh, path):
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln and not ln.startswith("#")]
    n = int(lines[0])
    if n != mesh.n_nodes:
        raise ConfigurationError(
            f"field file has {n} values but mesh has {mesh.n_nodes} nodes")
    return ScalarField(mesh, np.array([float(x) for x in lines[1:n + 1]]))

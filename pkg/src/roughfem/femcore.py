"""P1 finite-element assembly, sparse systems, CG solver and error norms.

Matrices are stored in compressed-row (scipy CSR) form.  Assembly is
vectorized over elements with a fixed accumulation order, so repeated runs
are bitwise identical.  The solver is a hand-rolled Jacobi-preconditioned
conjugate gradient: deterministic in serial mode and matrix-free friendly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .geometry import ROUGH, DIRICHLET, TriMesh, GridLocator

_GAUSS2_X = (np.polynomial.legendre.leggauss(2)[0] + 1.0) / 2.0
_GAUSS2_W = np.polynomial.legendre.leggauss(2)[1] / 2.0


class AssemblyError(Exception):
    pass


class ConstraintError(Exception):
    pass


class ConvergenceError(Exception):
    def __init__(self, msg, residual=None, iterations=None):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations


@dataclass
class SparseSystem:
    """Symmetric sparse system with optional Dirichlet constraints.

    The full (unconstrained) matrix is kept; constraints are eliminated
    symmetrically on demand.  `free` is the free-dof permutation.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    constrained_nodes: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    constrained_values: np.ndarray = field(default_factory=lambda: np.array([]))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.constrained_nodes] = False
        return np.flatnonzero(mask)

    def reduced(self) -> tuple[sp.csr_matrix, np.ndarray]:
        """Constrained rows/columns eliminated; rhs lifted by -A[:,c] u_c."""
        free = self.free
        b = self.rhs.copy()
        if len(self.constrained_nodes):
            lift = self.matrix[:, self.constrained_nodes] @ self.constrained_values
            b = b - lift
        return self.matrix[free][:, free].tocsr(), b[free]

    def expand(self, x_free: np.ndarray) -> np.ndarray:
        full = np.zeros(self.n)
        full[self.free] = x_free
        full[self.constrained_nodes] = self.constrained_values
        return full


@dataclass
class Field:
    """Nodal values of a P1 function on a mesh."""

    mesh: TriMesh
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.mesh.num_vertices:
            raise ValueError("value count does not match vertex count")

    def triangle_gradients(self) -> np.ndarray:
        """Piecewise-constant P1 gradient, shape (nt, 2)."""
        b, c, area = _p1_coefficients(self.mesh)
        u = self.values[self.mesh.triangles]
        gx = np.sum(u * b, axis=1)
        gy = np.sum(u * c, axis=1)
        return np.stack([gx, gy], axis=1)

    def as_evaluator(self, nearest_fallback: bool = True) -> "Callable":
        """(points) -> (values, gradients) via P1 interpolation."""
        grads = None

        def evaluate(points):
            nonlocal grads
            tri, bary, _ = self.mesh.locate(points, nearest_fallback=nearest_fallback)
            vals = np.sum(self.values[self.mesh.triangles[tri]] * bary, axis=1)
            if grads is None:
                grads = self.triangle_gradients()
            return vals, grads[tri]

        return evaluate

    def write(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(f"{len(self.values)}\n")
            for v in self.values:
                f.write(f"{float(v)!r}\n")

    @staticmethod
    def read(path: str, mesh: TriMesh) -> "Field":
        with open(path) as f:
            n = int(f.readline())
            vals = np.array([float(f.readline()) for _ in range(n)])
        return Field(mesh, vals)


def _p1_coefficients(mesh: TriMesh):
    """Gradients of the three nodal basis functions per triangle.

    Returns (b, c, area) with grad(phi_k) = (b[:, k], c[:, k])."""
    tc = mesh.triangle_corners()
    x, y = tc[..., 0], tc[..., 1]
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
                  - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    if np.any(area <= 0):
        raise AssemblyError(f"degenerate triangle {int(np.argmin(area))}")
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    return b / (2 * area[:, None]), c / (2 * area[:, None]), area


def element_stiffness(mesh: TriMesh, subset: np.ndarray | None = None) -> np.ndarray:
    """Local 3x3 stiffness blocks, shape (nt, 3, 3)."""
    b, c, area = _p1_coefficients(mesh)
    if subset is not None:
        b, c, area = b[subset], c[subset], area[subset]
    return area[:, None, None] * (b[:, :, None] * b[:, None, :]
                                  + c[:, :, None] * c[:, None, :])


def scatter_blocks(n: int, triangles: np.ndarray, blocks: np.ndarray) -> sp.csr_matrix:
    """Assemble per-element 3x3 blocks into a CSR matrix (ordered by element)."""
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    mat = sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(n, n))
    return mat.tocsr()


def assemble_stiffness(mesh: TriMesh) -> SparseSystem:
    """Standard P1 stiffness matrix (exact element integrals)."""
    blocks = element_stiffness(mesh)
    A = scatter_blocks(mesh.num_vertices, mesh.triangles, blocks)
    return SparseSystem(A, np.zeros(mesh.num_vertices))


def assemble_load(mesh: TriMesh, f: Callable,
                  subset: np.ndarray | None = None) -> np.ndarray:
    """Load vector by the 3-point edge-midpoint rule (exact for linear f).

    f(x, y) must accept arrays.  With `subset`, only those triangles
    contribute (used to combine standard and multiscale elements).
    """
    tris = mesh.triangles if subset is None else mesh.triangles[subset]
    tc = mesh.vertices[tris]
    _, _, area_all = _p1_coefficients(mesh)
    area = area_all if subset is None else area_all[subset]
    out = np.zeros(mesh.num_vertices)
    # midpoint opposite vertex k carries phi_k = 0, the other two 1/2
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        mid = 0.5 * (tc[:, i] + tc[:, j])
        w = area / 3.0 * 0.5 * np.asarray(f(mid[:, 0], mid[:, 1]), dtype=float)
        np.add.at(out, tris[:, i], w)
        np.add.at(out, tris[:, j], w)
    return out


def assemble_edge_flux(mesh: TriMesh, tag: int, g: Callable) -> np.ndarray:
    """Boundary flux vector: 2-point Gauss along each tagged polyline edge."""
    if tag not in (ROUGH, DIRICHLET):
        raise AssemblyError(f"unknown edge tag {tag}")
    edges = mesh.tagged_edges(tag)
    out = np.zeros(mesh.num_vertices)
    if len(edges) == 0:
        return out
    a = mesh.vertices[edges[:, 0]]
    b = mesh.vertices[edges[:, 1]]
    length = np.linalg.norm(b - a, axis=1)
    for xq, wq in zip(_GAUSS2_X, _GAUSS2_W):
        pt = a + xq * (b - a)
        val = np.asarray(g(pt[:, 0], pt[:, 1]), dtype=float)
        np.add.at(out, edges[:, 0], wq * length * val * (1.0 - xq))
        np.add.at(out, edges[:, 1], wq * length * val * xq)
    return out


def impose_dirichlet(system: SparseSystem, nodes, values) -> SparseSystem:
    """Attach Dirichlet constraints (symmetric elimination happens in reduced()).

    values: scalar, array aligned with nodes, or callable value(x, y)."""
    nodes = np.asarray(nodes, dtype=int)
    if callable(values):
        # resolve against mesh coordinates stored by the caller: the system
        # does not know the mesh, so callers pass coordinates via closure;
        # here we only accept arrays/scalars.
        raise ConstraintError("pass resolved values, not a callable")
    vals = np.broadcast_to(np.asarray(values, dtype=float), nodes.shape).copy()
    allnodes = np.concatenate([system.constrained_nodes, nodes])
    allvals = np.concatenate([system.constrained_values, vals])
    order = np.argsort(allnodes, kind="stable")
    allnodes, allvals = allnodes[order], allvals[order]
    dup = allnodes[1:] == allnodes[:-1]
    if np.any(dup):
        conflict = np.abs(allvals[1:] - allvals[:-1]) > 1e-14
        if np.any(dup & conflict):
            bad = allnodes[1:][dup & conflict][0]
            raise ConstraintError(f"node {bad} constrained twice with conflicting values")
        keep = np.concatenate([[True], ~dup])
        allnodes, allvals = allnodes[keep], allvals[keep]
    return SparseSystem(system.matrix, system.rhs, allnodes, allvals)


def dirichlet_on_tagged(system: SparseSystem, mesh: TriMesh,
                        value_fn: Callable | float = 0.0,
                        tag: int = DIRICHLET) -> SparseSystem:
    """Constrain all nodes on tagged boundary edges; values from value_fn(x, y)."""
    nodes = mesh.tagged_nodes(tag)
    if callable(value_fn):
        vals = np.asarray(value_fn(mesh.vertices[nodes, 0],
                                   mesh.vertices[nodes, 1]), dtype=float)
    else:
        vals = np.full(len(nodes), float(value_fn))
    return impose_dirichlet(system, nodes, vals)


def cg(A: sp.csr_matrix, b: np.ndarray, tol: float = 1e-10,
       maxit: int | None = None, x0: np.ndarray | None = None):
    """Jacobi-preconditioned CG; returns (x, iterations, relative residual)."""
    n = len(b)
    if n == 0:
        return np.zeros(0), 0, 0.0
    if maxit is None:
        maxit = max(200, 40 * int(np.sqrt(n)) + 10 * n // 100 + 20000)
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise ConvergenceError("nonpositive diagonal entry; matrix not SPD")
    minv = 1.0 / diag
    x = np.zeros(n) if x0 is None else x0.copy()
    r = b - A @ x if x0 is not None else b.copy()
    normb = np.linalg.norm(b)
    if normb == 0.0:
        return np.zeros(n), 0, 0.0
    z = minv * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxit + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r)
        if res <= tol * normb:
            return x, it, res / normb
        z = minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(f"CG did not converge in {maxit} iterations "
                           f"(relative residual {res / normb:.3e})",
                           residual=res / normb, iterations=maxit)


def solve_cg(system: SparseSystem, tol: float = 1e-10,
             maxit: int | None = None, mesh: TriMesh | None = None) -> Field | np.ndarray:
    """Solve the constrained system; returns a Field if a mesh is given,
    otherwise the full nodal vector."""
    A, b = system.reduced()
    x_free, _, _ = cg(A, b, tol=tol, maxit=maxit)
    full = system.expand(x_free)
    if mesh is not None:
        return Field(mesh, full)
    return full


def condition_number_2norm(system: SparseSystem, tol: float = 1e-3,
                           maxit: int = 200_000) -> float:
    """2-norm condition number of the reduced matrix.

    Extreme eigenvalues by (inverse) power iteration with a fixed start
    vector; inner solves by CG.  Relative accuracy about `tol`.
    """
    A, _ = system.reduced()
    n = A.shape[0]
    if n == 0:
        raise ConvergenceError("empty reduced system")
    v = np.ones(n) / np.sqrt(n)
    lam_max = _power_iteration(lambda w: A @ w, v, tol, maxit)
    inner_tol = min(1e-10, tol * 1e-3)
    lam_min_inv = _power_iteration(lambda w: cg(A, w, tol=inner_tol)[0], v, tol, maxit)
    return lam_max * lam_min_inv


def _power_iteration(op, v, tol, maxit):
    lam = 0.0
    for it in range(maxit):
        w = op(v)
        lam_new = v @ w
        nw = np.linalg.norm(w)
        if nw == 0:
            raise ConvergenceError("power iteration collapsed")
        v = w / nw
        if it > 2 and abs(lam_new - lam) <= tol * abs(lam_new):
            return lam_new
        lam = lam_new
    raise ConvergenceError(f"power iteration did not converge in {maxit} steps")


def error_norms(fine: TriMesh, ref: Field, candidate: Callable,
                chunk: int = 400_000) -> tuple[float, float]:
    """(L2, H1-seminorm) distance between a P1 reference field and an
    arbitrary evaluator candidate(points) -> (values, gradients).

    L2 by the 3-point edge-midpoint rule per fine triangle, gradients by
    the 1-point centroid rule; the reference gradient is the P1 element
    gradient.
    """
    if ref.mesh is not fine:
        ref = Field(fine, ref.values)
    tc = fine.triangle_corners()
    _, _, area = _p1_coefficients(fine)
    uref = ref.values[fine.triangles]
    gref = ref.triangle_gradients()
    nt = fine.num_triangles
    l2_acc = 0.0
    h1_acc = 0.0
    for s in range(0, nt, chunk):
        sl = slice(s, min(s + chunk, nt))
        tcs, areas = tc[sl], area[sl]
        urefs = uref[sl]
        # L2: edge midpoints
        for k in range(3):
            i, j = (k + 1) % 3, (k + 2) % 3
            mid = 0.5 * (tcs[:, i] + tcs[:, j])
            vref = 0.5 * (urefs[:, i] + urefs[:, j])
            vcand, _ = candidate(mid)
            l2_acc += float(np.sum(areas / 3.0 * (vref - vcand) ** 2))
        # H1: centroid
        cen = tcs.mean(axis=1)
        _, gcand = candidate(cen)
        diff = gref[sl] - gcand
        h1_acc += float(np.sum(areas * np.sum(diff ** 2, axis=1)))
    return float(np.sqrt(l2_acc)), float(np.sqrt(h1_acc))


def write_system_coo(system: SparseSystem, path: str) -> None:
    """Coordinate (row, col, value) text export of the full matrix."""
    coo = system.matrix.tocoo()
    with open(path, "w") as f:
        f.write(f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            f.write(f"{r} {c} {float(v)!r}\n")

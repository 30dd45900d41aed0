"""Multiscale basis construction on rough-edge elements and global assembly.

Each rough-edge (T1) element gets three fine-scale basis functions solved
on a subgrid of the rescaled element: Laplace with the linear nodal values
as Dirichlet data on the two straight edges and a geometry/flux-aware
Neumann flux on the rough edge.  Elements without a rough edge keep the
standard linear basis, so the method degenerates to plain P1 on flat
boundaries with constant flux.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import geometry
from .geometry import (ROUGH, DIRICHLET, T1, BoundaryProfile, ElementFrame,
                       TriMesh, build_cell_mesh, element_frame)
from . import femcore
from .femcore import Field, SparseSystem, assemble_stiffness, assemble_load, \
    element_stiffness, scatter_blocks, impose_dirichlet, cg

_GAUSS2_X = (np.polynomial.legendre.leggauss(2)[0] + 1.0) / 2.0
_GAUSS2_W = np.polynomial.legendre.leggauss(2)[1] / 2.0

AUTO = "AUTO"
GEOMETRY_ONLY = "GEOMETRY_ONLY"
GEOMETRY_AND_FLUX = "GEOMETRY_AND_FLUX"


class FluxError(Exception):
    pass


@dataclass(frozen=True)
class FluxSpec:
    """Boundary flux g and the rule selecting the cell Neumann data.

    g: callable g(x1) along the rough boundary (vectorized), or None for a
    homogeneous flux.  In AUTO mode the flux oscillation is compared
    against threshold_constant * epsilon to decide whether the physical
    information enters the cell problem.
    """

    g: Callable | None
    epsilon: float
    threshold_constant: float = 1.0
    mode: str = AUTO

    def g_values(self, x1):
        if self.g is None:
            return np.zeros_like(np.asarray(x1, dtype=float))
        return np.asarray(self.g(np.asarray(x1, dtype=float)), dtype=float)

    def digest(self) -> str:
        import hashlib
        name = getattr(self.g, "__name__", "none") if self.g else "none"
        payload = f"{name}|{self.epsilon}|{self.threshold_constant}|{self.mode}"
        return hashlib.sha1(payload.encode()).hexdigest()[:12]


@dataclass
class FluxContext:
    """Per-element quantities entering the Neumann data of the cell problem."""

    r_hat: float          # discrete rough-edge arc length on the rescaled element
    gbar: float           # mean of g over the discrete rough edge
    b: np.ndarray         # (3,) normal derivatives of the rescaled linear basis
    branch: int           # 1 geometry only, 2 geometry and flux
    segments: np.ndarray  # (ns, 2) rough polyline node pairs, left to right


def _rough_segments(cellmesh: TriMesh) -> np.ndarray:
    segs = cellmesh.tagged_edges(ROUGH)
    # order left-to-right along x1_hat
    xmid = 0.5 * (cellmesh.vertices[segs[:, 0], 0] + cellmesh.vertices[segs[:, 1], 0])
    segs = segs[np.argsort(xmid, kind="stable")]
    swap = cellmesh.vertices[segs[:, 0], 0] > cellmesh.vertices[segs[:, 1], 0]
    segs[swap] = segs[swap][:, ::-1]
    return segs


def _basis_normal_derivatives(frame: ElementFrame) -> np.ndarray:
    """b_p: outward normal derivative on the rough-edge chord of the
    rescaled homogenized element's linear nodal basis functions."""
    v = frame.v_rescaled
    mesh1 = TriMesh(v, np.array([[0, 1, 2]]), np.empty((0, 2), dtype=int),
                    np.empty(0, dtype=int), np.array([geometry.T3]), 1.0)
    b, c, _ = femcore._p1_coefficients(mesh1)
    grads = np.stack([b[0], c[0]], axis=1)  # (3, 2)
    return grads @ frame.chord_normal()


def flux_context(frame: ElementFrame, cellmesh: TriMesh, spec: FluxSpec) -> FluxContext:
    """r_hat, mean flux, branch selection and b for one rough element."""
    segs = _rough_segments(cellmesh)
    a = cellmesh.vertices[segs[:, 0]]
    b_ = cellmesh.vertices[segs[:, 1]]
    length = np.linalg.norm(b_ - a, axis=1)
    r_hat = float(np.sum(length))
    # g at the quadrature points, in physical coordinates
    gq, wq = [], []
    for xq, wq_ in zip(_GAUSS2_X, _GAUSS2_W):
        pt = a + xq * (b_ - a)
        phys_x1 = frame.origin[0] + pt[:, 0] * frame.scale
        gq.append(spec.g_values(phys_x1))
        wq.append(wq_ * length)
    gq = np.concatenate(gq)
    wq = np.concatenate(wq)
    gbar = float(np.sum(wq * gq) / r_hat)
    bvec = _basis_normal_derivatives(frame)
    if spec.mode == GEOMETRY_ONLY:
        branch = 1
    elif spec.mode == GEOMETRY_AND_FLUX:
        branch = 2
    else:
        sup = float(np.max(np.abs(gq - gbar))) if len(gq) else 0.0
        branch = 1 if sup < spec.threshold_constant * spec.epsilon else 2
    if branch == 2:
        gmax = float(np.max(np.abs(gq))) if len(gq) else 0.0
        if abs(gbar) < 1e-12 * max(gmax, 1e-300):
            raise FluxError(
                "mean boundary flux over the rough edge is (numerically) zero; "
                "the flux-weighted Neumann data g/<g> is not well-defined. "
                "Split the flux as g = g1 + g2 with nonzero means and solve "
                "the two subproblems separately.")
    return FluxContext(r_hat, gbar, bvec, branch, segs)


def edge_flux_theta(frame: ElementFrame, cellmesh: TriMesh, spec: FluxSpec,
                    p: int) -> Callable:
    """Neumann data theta_p(x1_hat, x2_hat) on the rescaled rough edge."""
    ctx = flux_context(frame, cellmesh, spec)
    return _theta_function(frame, ctx, spec, p)


def _theta_function(frame: ElementFrame, ctx: FluxContext, spec: FluxSpec,
                    p: int) -> Callable:
    bp = ctx.b[p]

    def theta(x1_hat, x2_hat=None):
        x1_hat = np.asarray(x1_hat, dtype=float)
        if ctx.branch == 1:
            return np.full_like(x1_hat, bp / ctx.r_hat)
        phys_x1 = frame.origin[0] + x1_hat * frame.scale
        return (bp / ctx.r_hat) * spec.g_values(phys_x1) / ctx.gbar

    return theta


@dataclass
class MsBasis:
    """Three fine-scale nodal basis fields of one rough-edge element."""

    element_id: int
    frame: ElementFrame
    cellmesh: TriMesh
    fields: np.ndarray          # (3, n_cell_vertices)
    local_stiffness: np.ndarray # (3, 3), a_tau(Phi_p, Phi_q)
    context: FluxContext

    def polyline_integral(self, weight: Callable | None = None) -> np.ndarray:
        """integral over the rescaled rough edge of weight * Phi_p, per p.

        weight takes rescaled x1_hat (vectorized); None means 1."""
        segs = self.context.segments
        a = self.cellmesh.vertices[segs[:, 0]]
        b = self.cellmesh.vertices[segs[:, 1]]
        length = np.linalg.norm(b - a, axis=1)
        fa = self.fields[:, segs[:, 0]]
        fb = self.fields[:, segs[:, 1]]
        out = np.zeros(3)
        for xq, wq in zip(_GAUSS2_X, _GAUSS2_W):
            x1 = a[:, 0] + xq * (b[:, 0] - a[:, 0])
            w = np.ones_like(x1) if weight is None else np.asarray(weight(x1), dtype=float)
            phi = fa + xq * (fb - fa)  # (3, ns)
            out += np.sum(wq * length * w * phi, axis=1)
        return out

    def cell_inner_product(self, func: Callable) -> np.ndarray:
        """integral over the physical element of func * Phi_p, per p.

        func(x, y) in physical coordinates; midpoint rule on the cell mesh."""
        mesh = self.cellmesh
        tc = mesh.triangle_corners()
        _, _, area = femcore._p1_coefficients(mesh)
        u = self.fields[:, mesh.triangles]  # (3, nt, 3)
        out = np.zeros(3)
        for k in range(3):
            i, j = (k + 1) % 3, (k + 2) % 3
            mid = 0.5 * (tc[:, i] + tc[:, j])
            phys = self.frame.to_physical(mid)
            fv = np.asarray(func(phys[:, 0], phys[:, 1]), dtype=float)
            phi = 0.5 * (u[:, :, i] + u[:, :, j])
            out += np.sum(area / 3.0 * fv * phi, axis=1)
        return out * self.frame.scale ** 2


def solve_cell_basis(frame: ElementFrame, profile: BoundaryProfile,
                     spec: FluxSpec, htilde: float,
                     cg_tol: float = 1e-12) -> MsBasis:
    """Solve the three mixed cell problems of one rough-edge element."""
    cellmesh = build_cell_mesh(frame, profile, htilde)
    ctx = flux_context(frame, cellmesh, spec)
    system = assemble_stiffness(cellmesh)
    dir_nodes = cellmesh.tagged_nodes(DIRICHLET)
    coords = cellmesh.vertices[dir_nodes]
    # nodal basis values on the Dirichlet boundary = barycentric coordinates
    # with respect to the rescaled straight triangle
    v = frame.v_rescaled
    T = np.column_stack([v[1] - v[0], v[2] - v[0]])
    lam12 = np.linalg.solve(T, (coords - v[0]).T).T
    lam = np.column_stack([1.0 - lam12.sum(axis=1), lam12])  # (nd, 3)
    fields = np.empty((3, cellmesh.num_vertices))
    for p in range(3):
        dir_vals = lam[:, p]
        rhs = femcore.assemble_edge_flux(cellmesh, ROUGH,
                                         lambda x1, x2: _theta_function(frame, ctx, spec, p)(x1))
        sysp = SparseSystem(system.matrix, rhs)
        sysp = impose_dirichlet(sysp, dir_nodes, dir_vals)
        try:
            fields[p] = solve_reduced(sysp, cg_tol)
        except femcore.ConvergenceError as exc:
            raise femcore.ConvergenceError(
                f"cell solve failed for element {frame.element_id}, basis {p}: {exc}"
            ) from exc
    S = fields @ (system.matrix @ fields.T)
    S = 0.5 * (S + S.T)
    return MsBasis(frame.element_id, frame, cellmesh, fields, S, ctx)


def solve_reduced(system: SparseSystem, tol: float) -> np.ndarray:
    A, b = system.reduced()
    x, _, _ = cg(A, b, tol=tol)
    return system.expand(x)


def build_bases(coarse: TriMesh, profile: BoundaryProfile, spec: FluxSpec,
                htilde: float, workers: int = 1) -> dict[int, MsBasis]:
    """Cell bases for every T1 element; optionally solved concurrently.

    Results merge in ascending element order regardless of worker count."""
    t1_ids = [int(k) for k in np.flatnonzero(coarse.element_class == T1)]
    frames = {e: element_frame(coarse, e) for e in t1_ids}
    if workers <= 1:
        return {e: solve_cell_basis(frames[e], profile, spec, htilde) for e in t1_ids}
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {e: pool.submit(solve_cell_basis, frames[e], profile, spec, htilde)
                   for e in t1_ids}
        return {e: futures[e].result() for e in t1_ids}


def assemble_msfem(coarse: TriMesh, bases: dict[int, MsBasis], f: Callable | None,
                   spec: FluxSpec, dirichlet=0.0) -> SparseSystem:
    """Global MsFEM system: multiscale blocks on T1 elements, standard P1
    elsewhere; load and rough-boundary flux integrated on the cell meshes."""
    t1_ids = np.flatnonzero(coarse.element_class == T1)
    for e in t1_ids:
        if int(e) not in bases:
            raise femcore.AssemblyError(f"missing multiscale basis for element {int(e)}")
    blocks = element_stiffness(coarse)
    index = coarse.triangles.copy()
    for e in t1_ids:
        basis = bases[int(e)]
        blocks[e] = basis.local_stiffness
        index[e] = basis.frame.vertex_ids
    A = scatter_blocks(coarse.num_vertices, index, blocks)
    rhs = np.zeros(coarse.num_vertices)
    not_t1 = np.flatnonzero(coarse.element_class != T1)
    if f is not None:
        rhs += assemble_load(coarse, f, subset=not_t1)
        for e in t1_ids:
            basis = bases[int(e)]
            rhs[basis.frame.vertex_ids] += basis.cell_inner_product(f)
    if spec.g is not None:
        for e in t1_ids:
            basis = bases[int(e)]
            gw = lambda x1h: spec.g_values(basis.frame.origin[0] + x1h * basis.frame.scale)
            rhs[basis.frame.vertex_ids] += basis.frame.scale * basis.polyline_integral(gw)
    system = SparseSystem(A, rhs)
    return femcore.dirichlet_on_tagged(system, coarse, dirichlet, DIRICHLET)


class CompositeEvaluator:
    """Evaluates the composite MsFEM solution (value and gradient) anywhere.

    Inside a rough-edge element the point is mapped to the cell mesh and
    the fine-scale field interpolated; elsewhere plain P1 interpolation on
    the coarse element applies.  Points in the sliver between chord and
    rough curve fall back to the nearest cell triangle (counted in
    `sliver_fallbacks`).
    """

    def __init__(self, coeffs: Field, bases: dict[int, MsBasis]):
        self.coeffs = coeffs
        self.coarse = coeffs.mesh
        self.bases = bases
        self.sliver_fallbacks = 0
        self._coarse_grads = coeffs.triangle_gradients()
        self._cell_fields = {}
        self._cell_grads = {}
        for e, basis in bases.items():
            u = coeffs.values[basis.frame.vertex_ids]
            w = u @ basis.fields
            self._cell_fields[e] = w
            self._cell_grads[e] = Field(basis.cellmesh, w).triangle_gradients() \
                / basis.frame.scale

    def __call__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        tri, bary, exact = self.coarse.locate(pts, nearest_fallback=True)
        vals = np.sum(self.coeffs.values[self.coarse.triangles[tri]] * bary, axis=1)
        grads = self._coarse_grads[tri].copy()
        cls = self.coarse.element_class[tri]
        in_t1 = cls == T1
        if np.any(in_t1):
            order = np.argsort(tri[in_t1], kind="stable")
            idx = np.flatnonzero(in_t1)[order]
            te = tri[idx]
            bounds = np.flatnonzero(np.concatenate([[True], te[1:] != te[:-1]]))
            bounds = np.append(bounds, len(te))
            for s, t in zip(bounds[:-1], bounds[1:]):
                e = int(te[s])
                basis = self.bases[e]
                sel = idx[s:t]
                xh = basis.frame.to_rescaled(pts[sel])
                ctri, cbary, cexact = basis.cellmesh.locate(xh, nearest_fallback=True)
                self.sliver_fallbacks += int(np.sum(~cexact))
                w = self._cell_fields[e]
                vals[sel] = np.sum(w[basis.cellmesh.triangles[ctri]] * cbary, axis=1)
                grads[sel] = self._cell_grads[e][ctri]
        return vals, grads


def evaluate_solution(coeffs: Field, bases: dict[int, MsBasis],
                      query=None) -> CompositeEvaluator | tuple:
    """Composite-solution evaluator; with `query` given, evaluate directly."""
    ev = CompositeEvaluator(coeffs, bases)
    if query is None:
        return ev
    return ev(query)


# ---------------------------------------------------------------------------
# basis cache (mesh format + field format + 3x3 block)
# ---------------------------------------------------------------------------

def basis_cache_key(profile: BoundaryProfile, N: int, htilde: float,
                    spec: FluxSpec) -> str:
    return f"bases_{profile.digest()}_N{N}_ht{htilde:.3e}_{spec.digest()}"


def save_bases(dirpath: str, bases: dict[int, MsBasis]) -> None:
    os.makedirs(dirpath, exist_ok=True)
    meta = {}
    for e, basis in bases.items():
        geometry.write_mesh(basis.cellmesh, os.path.join(dirpath, f"cell_{e}.mesh"))
        np.savetxt(os.path.join(dirpath, f"fields_{e}.txt"), basis.fields.T)
        np.savetxt(os.path.join(dirpath, f"block_{e}.txt"), basis.local_stiffness)
        fr = basis.frame
        meta[str(e)] = {
            "origin": list(fr.origin), "scale": fr.scale, "a": fr.a, "b": fr.b,
            "v_rescaled": fr.v_rescaled.tolist(),
            "vertex_ids": fr.vertex_ids.tolist(),
            "r_hat": basis.context.r_hat, "gbar": basis.context.gbar,
            "b_vec": basis.context.b.tolist(), "branch": basis.context.branch,
        }
    with open(os.path.join(dirpath, "meta.json"), "w") as f:
        json.dump(meta, f, sort_keys=True)


def load_bases(dirpath: str) -> dict[int, MsBasis] | None:
    metapath = os.path.join(dirpath, "meta.json")
    if not os.path.exists(metapath):
        return None
    with open(metapath) as f:
        meta = json.load(f)
    out = {}
    for key in sorted(meta, key=int):
        m = meta[key]
        e = int(key)
        cellmesh = geometry.read_mesh(os.path.join(dirpath, f"cell_{e}.mesh"))
        fields = np.loadtxt(os.path.join(dirpath, f"fields_{e}.txt")).T
        block = np.loadtxt(os.path.join(dirpath, f"block_{e}.txt"))
        frame = ElementFrame(e, np.array(m["origin"]), m["scale"], m["a"], m["b"],
                             np.array(m["v_rescaled"]), np.array(m["vertex_ids"], dtype=int))
        ctx = FluxContext(m["r_hat"], m["gbar"], np.array(m["b_vec"]), m["branch"],
                          _rough_segments(cellmesh))
        out[e] = MsBasis(e, frame, cellmesh, fields, block, ctx)
    return out

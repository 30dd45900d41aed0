"""Effective boundary data, homogenized solves on the flat square, and the
periodic boundary-layer strip problems with their first-order corrector.

The rough Neumann boundary is replaced by a flat one carrying the averaged
flux r*<g>; the near-boundary behaviour is recovered by cell functions
solved on a truncated periodic half strip and rescaled back by epsilon.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import geometry, femcore
from .geometry import ROUGH, DIRICHLET, TriMesh, flat_profile, build_coarse_mesh
from .femcore import Field, SparseSystem, assemble_stiffness, assemble_load, \
    assemble_edge_flux, impose_dirichlet, dirichlet_on_tagged, cg, solve_cg

_G5X, _G5W = np.polynomial.legendre.leggauss(5)
_G5X = (_G5X + 1.0) / 2.0
_G5W = _G5W / 2.0

B0 = "B0"
B1 = "B1"
B2 = "B2"
B0_TILDE = "B0_TILDE"

_DATA_IDS = (B0, B1, B2, B0_TILDE)


class CompatibilityError(Exception):
    """Neumann data on the strip bottom fails the zero-mean requirement."""


def effective_flux(dgamma: Callable, g: Callable | None = None,
                   panels: int = 512) -> tuple[float, float, float]:
    """(r, <g>, r*<g>) for a unit-periodic profile derivative and flux.

    r = int_0^1 sqrt(1 + gamma'(t)^2) dt and <g> is the arc-length-weighted
    mean of g; r*<g> is the Neumann datum of the homogenized problem.
    Composite 5-point Gauss quadrature over `panels` subintervals.
    """
    edges = np.linspace(0.0, 1.0, panels + 1)
    a, b = edges[:-1], edges[1:]
    r = 0.0
    gint = 0.0
    for xq, wq in zip(_G5X, _G5W):
        t = a + xq * (b - a)
        w = np.sqrt(1.0 + np.asarray(dgamma(t), dtype=float) ** 2)
        r += np.sum(wq * (b - a) * w)
        if g is not None:
            gint += np.sum(wq * (b - a) * w * np.asarray(g(t), dtype=float))
    gbar = gint / r if g is not None else 0.0
    return float(r), float(gbar), float(r * gbar)


@dataclass(frozen=True)
class HomogenizedCase:
    """Laplace on the unit square: flux on the flat bottom, Dirichlet on the
    remaining sides."""

    f: Callable | None
    flux: float                      # effective Neumann datum r*<g> on the bottom
    dirichlet: Callable | float
    N: int
    dirichlet_bottom: bool = False   # constrain the bottom too (flux ignored)


def solve_homogenized(case: HomogenizedCase, tol: float = 1e-12) -> Field:
    """P1 solve of the homogenized problem on a uniform mesh of the square."""
    mesh = build_coarse_mesh(flat_profile(), case.N)
    system = assemble_stiffness(mesh)
    rhs = np.zeros(mesh.num_vertices)
    if case.f is not None:
        rhs += assemble_load(mesh, case.f)
    if case.flux != 0.0 and not case.dirichlet_bottom:
        rhs += assemble_edge_flux(mesh, ROUGH, lambda x1, x2: np.full_like(x1, case.flux))
    system = SparseSystem(system.matrix, rhs)
    system = dirichlet_on_tagged(system, mesh, case.dirichlet, DIRICHLET)
    if case.dirichlet_bottom:
        system = dirichlet_on_tagged(system, mesh, case.dirichlet, ROUGH)
    return solve_cg(system, tol=tol, mesh=mesh)


@dataclass(frozen=True)
class StripProblem:
    """Truncated periodic boundary-layer problem on {0<x1<1, gamma(x1)<x2<L}.

    data_id selects the Neumann data on the rough bottom:
      B0:       g - <g>
      B1:       -gamma' / sqrt(1 + gamma'^2)
      B2:       1 / sqrt(1 + gamma'^2) - 1/r
      B0_TILDE: (1/r) (g/<g> - 1)
    Homogeneous Dirichlet at x2 = L, periodic lateral sides.
    """

    gamma: Callable
    dgamma: Callable
    data_id: str
    L: float = 5.0
    hs: float = 1.0 / 64.0
    g: Callable | None = None

    def __post_init__(self):
        if self.data_id not in _DATA_IDS:
            raise ValueError(f"unknown strip data id {self.data_id!r}")
        if self.data_id in (B0, B0_TILDE) and self.g is None:
            raise ValueError(f"data id {self.data_id} requires a flux g")
        if self.L < 5.0:
            raise ValueError("truncation height L must be at least 5")

    def neumann_data(self) -> Callable:
        r, gbar, _ = effective_flux(self.dgamma, self.g)
        if self.data_id == B0:
            return lambda t: np.asarray(self.g(t), dtype=float) - gbar
        if self.data_id == B1:
            dg = self.dgamma
            return lambda t: -np.asarray(dg(t), dtype=float) / np.sqrt(
                1.0 + np.asarray(dg(t), dtype=float) ** 2)
        if self.data_id == B2:
            dg = self.dgamma
            return lambda t: 1.0 / np.sqrt(
                1.0 + np.asarray(dg(t), dtype=float) ** 2) - 1.0 / r
        if abs(gbar) < 1e-13:
            raise CompatibilityError("B0_TILDE data undefined for zero-mean flux")
        return lambda t: (np.asarray(self.g(t), dtype=float) / gbar - 1.0) / r

    def digest(self) -> str:
        gname = getattr(self.g, "__name__", "none") if self.g else "none"
        t = np.linspace(0.0, 1.0, 17)
        sig = np.asarray(self.gamma(t), dtype=float).tobytes()
        payload = sig + f"|{self.data_id}|{self.L}|{self.hs}|{gname}".encode()
        return hashlib.sha1(payload).hexdigest()[:16]


def strip_rows(L: float, hs: float) -> tuple[int, int]:
    """(graded rows below height 1, uniform rows above)."""
    m1 = max(2, int(round(1.0 / hs)))
    m2 = max(2, int(round((L - 1.0) / hs)))
    return m1, m2


def build_strip_mesh(gamma: Callable, L: float, hs: float) -> TriMesh:
    """Structured mesh of the truncated strip.

    Columns are graded from the piecewise-linear bottom curve up to height 1
    and continue with uniform rows up to the flat top at L.  Increasing L
    therefore only appends rows: the mesh below any fixed height is
    unchanged, which makes truncation comparisons clean.
    """
    n = max(2, int(round(1.0 / hs)))
    m1, m2 = strip_rows(L, hs)
    m = m1 + m2
    x = np.linspace(0.0, 1.0, n + 1)
    bottom = np.asarray(gamma(x), dtype=float)
    j1 = np.arange(m1 + 1)[:, None] / m1
    Y_low = bottom[None, :] + j1 * (1.0 - bottom[None, :])
    y_high = 1.0 + np.arange(1, m2 + 1) * (L - 1.0) / m2
    Y = np.vstack([Y_low, np.broadcast_to(y_high[:, None], (m2, n + 1))])
    X = np.broadcast_to(x[None, :], (m + 1, n + 1))
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)
    vid = lambda jj, ii: jj * (n + 1) + ii
    tris = []
    for jj in range(m):
        for ii in range(n):
            bl, br = vid(jj, ii), vid(jj, ii + 1)
            tl, tr = vid(jj + 1, ii), vid(jj + 1, ii + 1)
            tris.append((bl, br, tl))
            tris.append((br, tr, tl))
    triangles = np.array(tris, dtype=int)
    edges, tags = [], []
    for ii in range(n):
        edges.append((vid(0, ii), vid(0, ii + 1)))
        tags.append(ROUGH)
        edges.append((vid(m, ii), vid(m, ii + 1)))
        tags.append(DIRICHLET)
    boundary_edges = np.array(edges, dtype=int)
    edge_tags = np.array(tags, dtype=int)
    cls = geometry._classify(vertices, triangles, boundary_edges, edge_tags)
    diam = max(1.0 / n, (1.0 - bottom.min()) / m1, (L - 1.0) / m2) * np.sqrt(2.0)
    mesh = TriMesh(vertices, triangles, boundary_edges, edge_tags, cls, float(diam))
    if np.any(mesh.areas() <= 0):
        raise geometry.MeshError("inverted triangle in strip mesh")
    return mesh


def _periodic_fold(mesh: TriMesh, n_cols: int, m_rows: int):
    """Prolongation P identifying the right lateral column with the left one.

    Reduced dofs = all vertices except column n; full = P @ reduced.
    Also returns the full-to-reduced index map."""
    nv = mesh.num_vertices
    master = np.arange(nv)
    for jj in range(m_rows + 1):
        master[jj * (n_cols + 1) + n_cols] = jj * (n_cols + 1)
    keep = np.flatnonzero(master == np.arange(nv))
    red_index = -np.ones(nv, dtype=int)
    red_index[keep] = np.arange(len(keep))
    full_to_red = red_index[master]
    rows = np.arange(nv)
    P = sp.csr_matrix((np.ones(nv), (rows, full_to_red)), shape=(nv, len(keep)))
    return P, full_to_red


def solve_strip(problem: StripProblem, tol: float = 1e-12) -> Field:
    """P1 solve of the truncated periodic strip problem.

    Checks the arc-length-weighted zero mean of the Neumann data first;
    without it the layer would not decay and the truncation would be
    meaningless.
    """
    data = problem.neumann_data()
    edges = np.linspace(0.0, 1.0, 257)
    a, b = edges[:-1], edges[1:]
    mean = 0.0
    for xq, wq in zip(_G5X, _G5W):
        t = a + xq * (b - a)
        w = np.sqrt(1.0 + np.asarray(problem.dgamma(t), dtype=float) ** 2)
        mean += np.sum(wq * (b - a) * w * data(t))
    if abs(mean) > 1e-8:
        raise CompatibilityError(
            f"strip Neumann data {problem.data_id} has nonzero mean {mean:.3e}")

    mesh = build_strip_mesh(problem.gamma, problem.L, problem.hs)
    n = max(2, int(round(1.0 / problem.hs)))
    m = sum(strip_rows(problem.L, problem.hs))
    system = assemble_stiffness(mesh)
    # enforce compatibility on the discrete polyline as well: the analytic
    # zero mean carries an O(hs^2) imbalance onto the mesh, which would
    # excite a non-decaying constant Fourier mode of the strip
    segs = mesh.tagged_edges(ROUGH)
    slen = np.linalg.norm(mesh.vertices[segs[:, 1]] - mesh.vertices[segs[:, 0]], axis=1)
    dmean = 0.0
    from .femcore import _GAUSS2_X, _GAUSS2_W
    for xq, wq in zip(_GAUSS2_X, _GAUSS2_W):
        x1 = (1 - xq) * mesh.vertices[segs[:, 0], 0] + xq * mesh.vertices[segs[:, 1], 0]
        dmean += np.sum(wq * slen * data(x1))
    dmean /= np.sum(slen)
    rhs = assemble_edge_flux(mesh, ROUGH, lambda x1, x2: data(x1) - dmean)
    P, full_to_red = _periodic_fold(mesh, n, m)
    A_red = (P.T @ system.matrix @ P).tocsr()
    b_red = P.T @ rhs
    # top Dirichlet nodes in reduced numbering (right column folds away)
    top_full = np.arange(m * (n + 1), m * (n + 1) + n)
    reduced = SparseSystem(A_red, b_red)
    reduced = impose_dirichlet(reduced, full_to_red[top_full], 0.0)
    x_red = solve_cg(reduced, tol=tol)
    full = P @ x_red
    return Field(mesh, full)


def first_order_field(u0: Field, betas: dict[str, Field], epsilon: float) -> Callable:
    """Evaluator for the first-order approximant u0 + eps * u1.

    u1 combines the boundary-layer fields: B0 (or B0_TILDE weighted by the
    normal derivative of u0 on the flat bottom, which is -d/dx2) plus B1 and
    B2 weighted by the respective partial derivatives of u0.  Each beta is
    evaluated at (frac(x1/eps), x2/eps) and treated as zero above the
    truncation height.  u0 derivatives are the piecewise-constant element
    gradients.
    """
    for key in betas:
        if key not in _DATA_IDS:
            raise ValueError(f"unknown strip field key {key!r}")
    u0_eval = u0.as_evaluator(nearest_fallback=True)
    beta_evals = {k: f.as_evaluator(nearest_fallback=True) for k, f in betas.items()}
    heights = {k: max(f.mesh.vertices[:, 1]) for k, f in betas.items()}
    flagged = [False]

    def weight(key, g0):
        # coefficient multiplying beta_key: derivative of u0 entering u1
        if key == B0:
            return np.ones(len(g0))
        if key == B0_TILDE:
            return -g0[:, 1]          # du0/dn on the flat bottom, n = (0, -1)
        if key == B1:
            return g0[:, 0]
        return g0[:, 1]

    def evaluate(points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vals, g0 = u0_eval(pts)
        vals = vals.copy()
        grads = g0.copy()
        xi = np.stack([np.mod(pts[:, 0] / epsilon, 1.0), pts[:, 1] / epsilon], axis=1)
        for key, bev in beta_evals.items():
            inside = xi[:, 1] < heights[key]
            if not np.all(inside) and not flagged[0]:
                flagged[0] = True
            if not np.any(inside):
                continue
            bv = np.zeros(len(pts))
            bg = np.zeros((len(pts), 2))
            bv[inside], bg[inside] = bev(xi[inside])
            w = weight(key, g0)
            vals += epsilon * bv * w
            grads += bg * w[:, None]   # eps * (1/eps) chain rule in xi
        return vals, grads

    evaluate.truncation_flagged = flagged
    return evaluate


# ---------------------------------------------------------------------------
# strip field cache
# ---------------------------------------------------------------------------

def strip_cache_paths(cache_dir: str, problem: StripProblem) -> tuple[str, str]:
    key = f"strip_{problem.digest()}"
    return (os.path.join(cache_dir, key + ".mesh"),
            os.path.join(cache_dir, key + ".field"))


def solve_strip_cached(problem: StripProblem, cache_dir: str | None,
                       tol: float = 1e-12) -> Field:
    if cache_dir is None:
        return solve_strip(problem, tol=tol)
    meshpath, fieldpath = strip_cache_paths(cache_dir, problem)
    if os.path.exists(meshpath) and os.path.exists(fieldpath):
        mesh = geometry.read_mesh(meshpath)
        return Field.read(fieldpath, mesh)
    field = solve_strip(problem, tol=tol)
    os.makedirs(cache_dir, exist_ok=True)
    geometry.write_mesh(field.mesh, meshpath)
    field.write(fieldpath)
    return field

"""Rough-boundary profiles, boundary-conforming triangle meshes and element frames.

The domain is the unit square whose bottom boundary is replaced by a rough
curve x2 = height(x1).  Two profile kinds are supported: a smooth 1-periodic
closed-form profile (height = eps * gamma(x1/eps)) and a seeded piecewise
linear random profile (height = scale * eps * (gamma(x1) - 1) with gamma
interpolating random values on knots in [0, 1]).

All meshes are plain P1 triangle meshes with tagged boundary edges.  Bottom
elements are classified into three groups: T1 owns a rough edge, T2 touches
the rough boundary only through a vertex, T3 is interior.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

# boundary edge tags
ROUGH = 1
DIRICHLET = 2

# element classes
T1 = 1
T2 = 2
T3 = 3

# 5-point Gauss-Legendre rule on [0, 1]
_GAUSS5_X = (np.polynomial.legendre.leggauss(5)[0] + 1.0) / 2.0
_GAUSS5_W = np.polynomial.legendre.leggauss(5)[1] / 2.0

# 2-point Gauss-Legendre rule on [0, 1]
_GAUSS2_X = (np.polynomial.legendre.leggauss(2)[0] + 1.0) / 2.0
_GAUSS2_W = np.polynomial.legendre.leggauss(2)[1] / 2.0


class GeometryError(Exception):
    """Invalid geometric input or degenerate construction."""


class MeshError(Exception):
    """Mesh construction failed (shape regularity, resources)."""


class LocationError(Exception):
    """Point location failed beyond tolerance."""


# ---------------------------------------------------------------------------
# boundary profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundaryProfile:
    """Rough bottom boundary x2 = height(x1) on 0 <= x1 <= 1.

    kind "periodic": height(x1) = epsilon * gamma(x1/epsilon) with gamma a
    smooth 1-periodic map given in closed form (named, for serialization).
    kind "random": height(x1) = scale * epsilon * (gamma(x1) - 1) with gamma
    piecewise linear through (knots, values), values in [0, 1].
    """

    kind: str                      # "periodic" | "random"
    epsilon: float
    form: str = "flat"             # closed-form name for periodic kind
    amplitude: float = 0.0
    gamma: Callable | None = None  # unit-periodic map and its derivative
    dgamma: Callable | None = None
    knots: np.ndarray | None = None
    values: np.ndarray | None = None
    scale: float = 1.0
    seed: int | None = None
    random_abscissae: bool = False

    def __post_init__(self):
        if self.kind not in ("periodic", "random"):
            raise GeometryError(f"unknown profile kind {self.kind!r}")
        if self.epsilon <= 0:
            raise GeometryError("epsilon must be positive")
        if self.kind == "random":
            k = np.asarray(self.knots, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if k[0] != 0.0 or k[-1] != 1.0 or np.any(np.diff(k) <= 0):
                raise GeometryError("knots must be strictly increasing from 0 to 1")
            if v.min() < 0.0 or v.max() > 1.0:
                raise GeometryError("profile values must lie in [0, 1]")
            object.__setattr__(self, "knots", k)
            object.__setattr__(self, "values", v)

    # -- evaluation --------------------------------------------------------

    def height(self, x1):
        """Boundary height at x1 (vectorized); raises outside [0, 1]."""
        x = np.asarray(x1, dtype=float)
        if np.any(x < -1e-12) or np.any(x > 1 + 1e-12):
            raise GeometryError("x1 outside [0, 1]")
        x = np.clip(x, 0.0, 1.0)
        if self.kind == "periodic":
            return self.epsilon * np.asarray(self.gamma(x / self.epsilon), dtype=float)
        g = np.interp(x, self.knots, self.values)
        return self.scale * self.epsilon * (g - 1.0)

    def slope(self, x1):
        """d height / d x1 (vectorized; one-sided value at knots)."""
        x = np.clip(np.asarray(x1, dtype=float), 0.0, 1.0)
        if self.kind == "periodic":
            return np.asarray(self.dgamma(x / self.epsilon), dtype=float)
        s = np.diff(self.values) / np.diff(self.knots)
        idx = np.clip(np.searchsorted(self.knots, x, side="right") - 1, 0, len(s) - 1)
        return self.scale * self.epsilon * s[idx]

    def lipschitz(self) -> float:
        """ess-sup of |d height / d x1| (sampled for the periodic kind)."""
        if self.kind == "periodic":
            t = np.linspace(0.0, 1.0, 4097)
            return float(np.max(np.abs(self.dgamma(t))))
        s = np.diff(self.values) / np.diff(self.knots)
        return float(self.scale * self.epsilon * np.max(np.abs(s)))

    def breakpoints(self, a: float, b: float) -> np.ndarray:
        """Panel boundaries in (a, b) across which the slope may be nonsmooth."""
        if self.kind == "periodic":
            # smooth everywhere; quarter-period panels keep Gauss accurate
            step = self.epsilon / 4.0
            k0, k1 = np.ceil(a / step), np.floor(b / step)
            pts = np.arange(k0, k1 + 1) * step
        else:
            pts = self.knots
        pts = pts[(pts > a + 1e-15) & (pts < b - 1e-15)]
        return np.concatenate([[a], pts, [b]])

    # -- serialization -----------------------------------------------------

    def to_json(self) -> str:
        d = {"kind": self.kind, "epsilon": self.epsilon, "scale": self.scale}
        if self.kind == "periodic":
            if self.form == "custom":
                raise GeometryError("custom periodic profiles are not serializable")
            d["form"] = self.form
            d["amplitude"] = self.amplitude
        else:
            d.update({
                "M": int(len(self.knots) - 1),
                "seed": self.seed,
                "random_abscissae": self.random_abscissae,
            })
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "BoundaryProfile":
        d = json.loads(text)
        if d["kind"] == "periodic":
            if d["form"] == "flat":
                return flat_profile(d["epsilon"])
            if d["form"] == "cosine":
                return cosine_profile(d["epsilon"], d["amplitude"])
            raise GeometryError(f"unknown profile form {d['form']!r}")
        return make_random_profile(d["M"], d["seed"], d["random_abscissae"],
                                   d["scale"], d["epsilon"])

    def digest(self) -> str:
        """Stable content hash used for cache keys."""
        if self.kind == "random":
            payload = self.to_json() + self.knots.tobytes().hex() + self.values.tobytes().hex()
        else:
            payload = self.to_json()
        return hashlib.sha1(payload.encode()).hexdigest()[:16]


def cosine_profile(epsilon: float, amplitude: float = 0.1) -> BoundaryProfile:
    """Periodic profile gamma(t) = amplitude * (cos(2 pi t) - 1)."""
    a = amplitude
    return BoundaryProfile(
        kind="periodic", epsilon=epsilon, form="cosine", amplitude=a,
        gamma=lambda t: a * (np.cos(2 * np.pi * t) - 1.0),
        dgamma=lambda t: -2 * np.pi * a * np.sin(2 * np.pi * t),
    )


def flat_profile(epsilon: float = 1.0) -> BoundaryProfile:
    """Flat bottom boundary (gamma identically zero)."""
    return BoundaryProfile(
        kind="periodic", epsilon=epsilon, form="flat", amplitude=0.0,
        gamma=lambda t: np.zeros_like(np.asarray(t, dtype=float)),
        dgamma=lambda t: np.zeros_like(np.asarray(t, dtype=float)),
    )


def periodic_profile(epsilon: float, gamma: Callable, dgamma: Callable) -> BoundaryProfile:
    """Periodic profile from arbitrary callables (not serializable)."""
    return BoundaryProfile(kind="periodic", epsilon=epsilon, form="custom",
                           gamma=gamma, dgamma=dgamma)


def make_random_profile(M: int, seed: int, random_abscissae: bool = False,
                        scale: float = 0.1, epsilon: float = 1.0) -> BoundaryProfile:
    """Seeded piecewise-linear random profile on M intervals.

    Uniform knots i/M by default; with random_abscissae the interior knots
    are M-1 sorted uniform draws in (0, 1).  Values are M+1 uniform draws
    in [0, 1].  Deterministic in the seed (PCG64).
    """
    if M < 2:
        raise GeometryError("M must be at least 2")
    if scale <= 0:
        raise GeometryError("scale must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    if random_abscissae:
        inner = np.sort(rng.uniform(0.0, 1.0, M - 1))
        knots = np.concatenate([[0.0], inner, [1.0]])
    else:
        knots = np.linspace(0.0, 1.0, M + 1)
    values = rng.uniform(0.0, 1.0, M + 1)
    return BoundaryProfile(kind="random", epsilon=epsilon, knots=knots,
                           values=values, scale=scale, seed=int(seed),
                           random_abscissae=random_abscissae)


def eval_profile(profile: BoundaryProfile, x1: float) -> float:
    """Height of the rough boundary at a single coordinate x1 in [0, 1]."""
    return float(profile.height(x1))


def arc_length_ratio(profile: BoundaryProfile, a: float, b: float) -> float:
    """Arc length of the rough boundary over (a, b) divided by b - a.

    Composite 5-point Gauss on the panels where the slope is smooth; exact
    for piecewise-linear profiles.  Always >= 1.
    """
    if not a < b:
        raise GeometryError("need a < b")
    bp = profile.breakpoints(a, b)
    # refine each smooth panel so curved profiles integrate to ~1e-12
    bp = np.unique(np.concatenate(
        [np.linspace(u, v, 9) for u, v in zip(bp[:-1], bp[1:])]))
    left, width = bp[:-1], np.diff(bp)
    x = left[:, None] + width[:, None] * _GAUSS5_X[None, :]
    integ = np.sqrt(1.0 + profile.slope(x) ** 2)
    total = float(np.sum(width[:, None] * _GAUSS5_W[None, :] * integ))
    return total / (b - a)


def domain_area(profile: BoundaryProfile) -> float:
    """Area of the rough domain: 1 - integral of height over (0, 1)."""
    bp = profile.breakpoints(0.0, 1.0)
    left, width = bp[:-1], np.diff(bp)
    x = left[:, None] + width[:, None] * _GAUSS5_X[None, :]
    return 1.0 - float(np.sum(width[:, None] * _GAUSS5_W[None, :] * profile.height(x)))


# ---------------------------------------------------------------------------
# triangle meshes
# ---------------------------------------------------------------------------

@dataclass
class TriMesh:
    """Conforming P1 triangle mesh with tagged boundary and element classes."""

    vertices: np.ndarray        # (nv, 2)
    triangles: np.ndarray       # (nt, 3) CCW vertex indices
    boundary_edges: np.ndarray  # (ne, 2) vertex pairs
    edge_tags: np.ndarray       # (ne,) ROUGH or DIRICHLET
    element_class: np.ndarray   # (nt,) T1/T2/T3
    h: float                    # max element diameter
    _locator: "GridLocator | None" = field(default=None, repr=False, compare=False)
    _geom: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def triangle_corners(self) -> np.ndarray:
        """Corner coordinates, shape (nt, 3, 2)."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        c = self.triangle_corners()
        d1 = c[:, 1] - c[:, 0]
        d2 = c[:, 2] - c[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def min_angle(self) -> float:
        """Smallest interior angle over all triangles, degrees."""
        c = self.triangle_corners()
        angs = []
        for k in range(3):
            u = c[:, (k + 1) % 3] - c[:, k]
            v = c[:, (k + 2) % 3] - c[:, k]
            cosang = np.sum(u * v, axis=1) / (
                np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            angs.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
        return float(np.min(angs))

    def tagged_edges(self, tag: int) -> np.ndarray:
        return self.boundary_edges[self.edge_tags == tag]

    def tagged_nodes(self, tag: int) -> np.ndarray:
        return np.unique(self.tagged_edges(tag))

    # -- point location ----------------------------------------------------

    def _bary_geometry(self):
        if self._geom is None:
            c = self.triangle_corners()
            a = c[:, 0]
            m = np.stack([c[:, 1] - a, c[:, 2] - a], axis=-1)  # (nt, 2, 2)
            det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
            inv = np.empty_like(m)
            inv[:, 0, 0] = m[:, 1, 1] / det
            inv[:, 0, 1] = -m[:, 0, 1] / det
            inv[:, 1, 0] = -m[:, 1, 0] / det
            inv[:, 1, 1] = m[:, 0, 0] / det
            self._geom = (a, inv)
        return self._geom

    def locate(self, points: np.ndarray, tol: float = 1e-12,
               nearest_fallback: bool = False):
        """Locate points; returns (tri ids, barycentric (n,3), exact mask).

        Ties on shared edges resolve to the lowest triangle id.  With
        nearest_fallback, points outside the mesh get the triangle whose
        barycentric extension violates least (linear extrapolation);
        otherwise they raise LocationError.
        """
        if self._locator is None:
            self._locator = GridLocator(self)
        return self._locator.locate(points, tol, nearest_fallback)


class GridLocator:
    """Uniform background grid over a TriMesh for batched point location."""

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh
        v = mesh.vertices
        self.lo = v.min(axis=0)
        self.hi = v.max(axis=0)
        n = max(1, int(np.sqrt(mesh.num_triangles / 2)))
        self.shape = (n, n)
        span = np.maximum(self.hi - self.lo, 1e-300)
        self.inv_cell = np.array([n, n]) / span
        c = mesh.triangle_corners()
        bb_lo = c.min(axis=1)
        bb_hi = c.max(axis=1)
        i0 = np.clip(((bb_lo - self.lo) * self.inv_cell).astype(int), 0, n - 1)
        i1 = np.clip(((bb_hi - self.lo) * self.inv_cell).astype(int), 0, n - 1)
        cells: list[list[int]] = [[] for _ in range(n * n)]
        for t in range(mesh.num_triangles):
            for ix in range(i0[t, 0], i1[t, 0] + 1):
                for iy in range(i0[t, 1], i1[t, 1] + 1):
                    cells[ix * n + iy].append(t)
        counts = np.array([len(c_) for c_ in cells])
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.items = np.array([t for c_ in cells for t in c_], dtype=int)
        self.max_per_cell = int(counts.max()) if len(counts) else 0

    def _candidates(self, pts):
        n = self.shape[0]
        ij = np.clip(((pts - self.lo) * self.inv_cell).astype(int), 0, n - 1)
        return ij[:, 0] * n + ij[:, 1]

    def locate(self, points, tol=1e-12, nearest_fallback=False, chunk=200_000):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        tri = np.full(len(pts), -1, dtype=int)
        bary = np.zeros((len(pts), 3))
        exact = np.zeros(len(pts), dtype=bool)
        for s in range(0, len(pts), chunk):
            sl = slice(s, min(s + chunk, len(pts)))
            t_, b_, e_ = self._locate_chunk(pts[sl], tol)
            tri[sl], bary[sl], exact[sl] = t_, b_, e_
        miss = tri < 0
        if np.any(miss):
            if not nearest_fallback:
                raise LocationError(f"{int(miss.sum())} points outside the mesh "
                                    f"beyond tolerance {tol}")
            t_, b_ = self._nearest(pts[miss])
            tri[miss], bary[miss] = t_, b_
        return tri, bary, exact

    def _bary_for_pairs(self, pts, pt_idx, tri_idx):
        a, inv = self.mesh._bary_geometry()
        d = pts[pt_idx] - a[tri_idx]
        l1 = inv[tri_idx, 0, 0] * d[:, 0] + inv[tri_idx, 0, 1] * d[:, 1]
        l2 = inv[tri_idx, 1, 0] * d[:, 0] + inv[tri_idx, 1, 1] * d[:, 1]
        return np.stack([1.0 - l1 - l2, l1, l2], axis=1)

    def _locate_chunk(self, pts, tol):
        cell = self._candidates(pts)
        cnt = self.offsets[cell + 1] - self.offsets[cell]
        pt_idx = np.repeat(np.arange(len(pts)), cnt)
        starts = np.repeat(self.offsets[cell], cnt)
        within = np.arange(len(pt_idx)) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        tri_idx = self.items[starts + within]
        lam = self._bary_for_pairs(pts, pt_idx, tri_idx)
        ok = np.all(lam >= -tol, axis=1)
        tri = np.full(len(pts), -1, dtype=int)
        bary = np.zeros((len(pts), 3))
        if np.any(ok):
            # lowest triangle id wins: scan pairs sorted by (point, tri id)
            order = np.lexsort((tri_idx[ok], pt_idx[ok]))
            p_ord = pt_idx[ok][order]
            first = np.ones(len(p_ord), dtype=bool)
            first[1:] = p_ord[1:] != p_ord[:-1]
            sel = order[first]
            tri[pt_idx[ok][sel]] = tri_idx[ok][sel]
            bary[pt_idx[ok][sel]] = lam[ok][sel]
        return tri, bary, tri >= 0

    def _nearest(self, pts):
        """Best extrapolating triangle from a 3x3 grid neighborhood."""
        n = self.shape[0]
        q = np.clip(pts, self.lo, self.hi)
        ij = np.clip(((q - self.lo) * self.inv_cell).astype(int), 0, n - 1)
        tri = np.full(len(pts), -1, dtype=int)
        bary = np.zeros((len(pts), 3))
        best = np.full(len(pts), -np.inf)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                ix = np.clip(ij[:, 0] + dx, 0, n - 1)
                iy = np.clip(ij[:, 1] + dy, 0, n - 1)
                cell = ix * n + iy
                cnt = self.offsets[cell + 1] - self.offsets[cell]
                if cnt.sum() == 0:
                    continue
                pt_idx = np.repeat(np.arange(len(pts)), cnt)
                starts = np.repeat(self.offsets[cell], cnt)
                within = np.arange(len(pt_idx)) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                tri_idx = self.items[starts + within]
                lam = self._bary_for_pairs(pts, pt_idx, tri_idx)
                score = lam.min(axis=1)
                # keep the best (least-violating) candidate per point
                order = np.lexsort((tri_idx, -score, pt_idx))
                p_ord = pt_idx[order]
                first = np.ones(len(p_ord), dtype=bool)
                first[1:] = p_ord[1:] != p_ord[:-1]
                sel = order[first]
                pi, ti, la, sc = pt_idx[sel], tri_idx[sel], lam[sel], score[sel]
                upd = sc > best[pi]
                tri[pi[upd]] = ti[upd]
                bary[pi[upd]] = la[upd]
                best[pi[upd]] = sc[upd]
        if np.any(tri < 0):
            # empty neighborhood: fall back to a global scan for those points
            for i in np.flatnonzero(tri < 0):
                lam = self._bary_for_pairs(pts[i:i + 1].repeat(self.mesh.num_triangles, 0),
                                           np.arange(self.mesh.num_triangles),
                                           np.arange(self.mesh.num_triangles))
                k = int(np.argmax(lam.min(axis=1)))
                tri[i], bary[i] = k, lam[k]
        return tri, bary


def locate_point(mesh: TriMesh, p) -> tuple[int, np.ndarray]:
    """Locate a single point; returns (triangle id, barycentric coordinates)."""
    tri, bary, _ = mesh.locate(np.asarray(p, dtype=float)[None, :])
    return int(tri[0]), bary[0]


# ---------------------------------------------------------------------------
# structured mesh builders
# ---------------------------------------------------------------------------

def _classify(vertices, triangles, boundary_edges, edge_tags):
    rough_edges = {tuple(sorted(e)) for e, t in zip(boundary_edges, edge_tags)
                   if t == ROUGH}
    rough_nodes = set()
    for e in rough_edges:
        rough_nodes.update(e)
    cls = np.full(len(triangles), T3, dtype=int)
    for k, tri in enumerate(triangles):
        edges = {tuple(sorted((tri[i], tri[(i + 1) % 3]))) for i in range(3)}
        n_rough = len(edges & rough_edges)
        if n_rough >= 1:
            if n_rough > 1:
                raise MeshError(f"triangle {k} owns {n_rough} rough edges")
            cls[k] = T1
        elif rough_nodes & set(int(v) for v in tri):
            cls[k] = T2
    return cls


def _tent_ok(profile: BoundaryProfile, x0: float, x1: float,
             y_lo_at: float, y_hi_at: float, apex_left: bool) -> bool:
    """Whether the rough curve stays weakly below the hypotenuse of the
    candidate T1 tent over the quad [x0, x1].

    apex_left: hypotenuse runs from (x0, y_hi_at) to (x1, curve(x1));
    otherwise from (x0, curve(x0)) to (x1, y_hi_at)."""
    bp = profile.breakpoints(x0, x1)
    xs = np.unique(np.concatenate([bp, np.linspace(x0, x1, 65)]))
    b0, b1 = profile.height(x0), profile.height(x1)
    if apex_left:
        ya, yb = y_hi_at, b1
    else:
        ya, yb = b0, y_hi_at
    line = ya + (xs - x0) / (x1 - x0) * (yb - ya)
    return bool(np.all(profile.height(xs) <= line + 1e-12))


def _grid_mesh(profile: BoundaryProfile, N: int, graded: bool) -> TriMesh:
    """Structured mesh of the rough unit square, N columns.

    graded=False: rows j >= 1 at heights j/N (coarse layout, bottom row
    absorbs the curve).  graded=True: each column uniformly subdivided from
    the curve to the top (reference layout, robust for deep roughness).
    Quads split by the top-left to bottom-right diagonal; a bottom quad
    flips its diagonal when the rough curve would cross the tent roof.
    """
    hs = 1.0 / N
    x = np.linspace(0.0, 1.0, N + 1)
    bottom = profile.height(x)
    X = np.tile(x, N + 1).reshape(N + 1, N + 1)       # row j, column i
    j = np.arange(N + 1)[:, None] / N
    if graded:
        Y = bottom[None, :] + j * (1.0 - bottom[None, :])
    else:
        Y = np.broadcast_to(j, (N + 1, N + 1)).copy()
        Y = np.where(j == 0, bottom[None, :], Y)
    vid = lambda jj, ii: jj * (N + 1) + ii
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)
    tris = []
    for jj in range(N):
        for ii in range(N):
            bl, br = vid(jj, ii), vid(jj, ii + 1)
            tl, tr = vid(jj + 1, ii), vid(jj + 1, ii + 1)
            flip = False
            if jj == 0 and not graded:
                if not _tent_ok(profile, x[ii], x[ii + 1], hs, hs, apex_left=True):
                    if _tent_ok(profile, x[ii], x[ii + 1], hs, hs, apex_left=False):
                        flip = True
                    else:
                        raise MeshError(
                            f"rough curve crosses both tent candidates of "
                            f"bottom quad {ii}; roughness too deep for N={N}")
            if flip:
                tris.append((bl, br, tr))
                tris.append((bl, tr, tl))
            else:
                tris.append((bl, br, tl))
                tris.append((br, tr, tl))
    triangles = np.array(tris, dtype=int)
    edges, tags = [], []
    for ii in range(N):                               # bottom: rough
        edges.append((vid(0, ii), vid(0, ii + 1)))
        tags.append(ROUGH)
    for jj in range(N):                               # sides
        edges.append((vid(jj, 0), vid(jj + 1, 0)))
        tags.append(DIRICHLET)
        edges.append((vid(jj, N), vid(jj + 1, N)))
        tags.append(DIRICHLET)
    for ii in range(N):                               # top
        edges.append((vid(N, ii), vid(N, ii + 1)))
        tags.append(DIRICHLET)
    boundary_edges = np.array(edges, dtype=int)
    edge_tags = np.array(tags, dtype=int)
    cls = _classify(vertices, triangles, boundary_edges, edge_tags)
    corners = vertices[triangles]
    diam = max(np.linalg.norm(corners[:, a] - corners[:, b], axis=1).max()
               for a, b in ((0, 1), (1, 2), (2, 0)))
    mesh = TriMesh(vertices, triangles, boundary_edges, edge_tags, cls, float(diam))
    if np.any(mesh.areas() <= 0):
        k = int(np.argmin(mesh.areas()))
        raise MeshError(f"degenerate or inverted triangle {k}")
    return mesh


def build_coarse_mesh(profile: BoundaryProfile, N: int,
                      min_angle_deg: float = 15.0) -> TriMesh:
    """Coarse boundary-conforming mesh: uniform grid, bottom row snapped
    to the rough curve.  Rejects meshes below the minimum-angle threshold."""
    if N < 2:
        raise GeometryError("N must be at least 2")
    mesh = _grid_mesh(profile, N, graded=False)
    ang = mesh.min_angle()
    if ang < min_angle_deg:
        # identify the offending element for the error message
        bad = _worst_triangle(mesh)
        raise MeshError(f"shape regularity violated: min angle {ang:.2f} deg "
                        f"< {min_angle_deg} deg at triangle {bad}")
    return mesh


def _worst_triangle(mesh: TriMesh) -> int:
    c = mesh.triangle_corners()
    worst, worst_k = 180.0, 0
    for k in range(mesh.num_triangles):
        for i in range(3):
            u = c[k, (i + 1) % 3] - c[k, i]
            v = c[k, (i + 2) % 3] - c[k, i]
            a = np.degrees(np.arccos(np.clip(
                np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)), -1, 1)))
            if a < worst:
                worst, worst_k = a, k
    return worst_k


def build_reference_mesh(profile: BoundaryProfile, hfine: float,
                         vertex_cap: int = 3_000_000) -> TriMesh:
    """Fine boundary-conforming mesh with column-graded vertical spacing.

    Each column is subdivided uniformly between the rough curve and the top,
    which stays valid (no inverted elements) for arbitrarily deep roughness.
    """
    if hfine <= 0:
        raise GeometryError("hfine must be positive")
    N = int(np.ceil(1.0 / hfine))
    if (N + 1) ** 2 > vertex_cap:
        raise MeshError(f"projected vertex count {(N + 1) ** 2} exceeds cap {vertex_cap}")
    return _grid_mesh(profile, N, graded=True)


# ---------------------------------------------------------------------------
# element frames and cell meshes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ElementFrame:
    """Affine frame of a rough-edge element: physical -> rescaled unit size.

    The rescaled element has its rough edge spanning x1 in (0, 1); the map
    is x_hat = (x - origin) / scale.  v_rescaled holds the rescaled straight
    triangle (V1, V2 the rough-edge endpoints left/right, V3 the apex) and
    vertex_ids the matching global coarse vertex indices.
    """

    element_id: int
    origin: np.ndarray       # (2,)
    scale: float
    a: float                 # rough-edge interval in physical x1
    b: float
    v_rescaled: np.ndarray   # (3, 2)
    vertex_ids: np.ndarray   # (3,)

    def to_rescaled(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.origin) / self.scale

    def to_physical(self, xh: np.ndarray) -> np.ndarray:
        return np.asarray(xh, dtype=float) * self.scale + self.origin

    def chord_normal(self) -> np.ndarray:
        """Outward unit normal of the rescaled rough-edge chord V1 V2."""
        t = self.v_rescaled[1] - self.v_rescaled[0]
        n = np.array([t[1], -t[0]])
        n /= np.linalg.norm(n)
        # outward: away from the apex
        if np.dot(n, self.v_rescaled[2] - self.v_rescaled[0]) > 0:
            n = -n
        return n


def element_frame(mesh: TriMesh, element_id: int) -> ElementFrame:
    """Frame for a T1 element of a coarse mesh."""
    if mesh.element_class[element_id] != T1:
        raise GeometryError(f"element {element_id} is not a rough-edge element")
    tri = mesh.triangles[element_id]
    rough = {tuple(sorted(e)) for e in mesh.tagged_edges(ROUGH)}
    edge = None
    for i in range(3):
        e = tuple(sorted((tri[i], tri[(i + 1) % 3])))
        if e in rough:
            edge = e
            break
    v = mesh.vertices
    e0, e1 = edge
    if v[e0, 0] > v[e1, 0]:
        e0, e1 = e1, e0
    apex = [int(q) for q in tri if q not in (e0, e1)][0]
    a, b = float(v[e0, 0]), float(v[e1, 0])
    scale = b - a
    if scale <= 0:
        raise GeometryError(f"degenerate frame for element {element_id}")
    origin = np.array([a, 0.0])
    ids = np.array([e0, e1, apex], dtype=int)
    vr = (v[ids] - origin) / scale
    return ElementFrame(element_id, origin, scale, a, b, vr, ids)


def build_cell_mesh(frame: ElementFrame, profile: BoundaryProfile,
                    htilde: float) -> TriMesh:
    """Subgrid mesh on the rescaled rough element.

    The element is the region between the rescaled rough curve and the two
    straight edges through the apex ("tent").  Columns at uniform x1_hat are
    subdivided vertically between curve and tent roof; degenerate columns
    (where the roof meets the curve) collapse to the corner vertex.
    """
    if frame.scale <= 0:
        raise GeometryError("degenerate frame")
    if htilde <= 0:
        raise GeometryError("cell mesh size htilde must be positive")
    hloc = htilde / frame.scale          # rescaled target spacing
    n = max(2, int(np.ceil(1.0 / hloc)))
    t = np.linspace(0.0, 1.0, n + 1)
    gam = profile.height(frame.a + t * frame.scale) / frame.scale
    v1, v2, v3 = frame.v_rescaled
    # tent roof as a function of x1_hat
    roof_x = [v1[0]]
    roof_y = [v1[1]]
    if v1[0] < v3[0] < v2[0]:
        roof_x.append(v3[0]); roof_y.append(v3[1])
    elif abs(v3[0] - v1[0]) < 1e-14:
        roof_x[0] = v1[0]; roof_y[0] = v3[1]
    roof_x.append(v2[0])
    roof_y.append(v3[1] if abs(v3[0] - v2[0]) < 1e-14 else v2[1])
    roof = np.interp(t, roof_x, roof_y)
    gap = roof - gam
    if np.any(gap < -1e-12):
        raise GeometryError(f"rough curve crosses the straight edges of "
                            f"element {frame.element_id}")
    m = max(2, int(np.ceil(gap.max() / hloc)))
    collapsed = gap <= 1e-13
    # vertex numbering: collapsed columns contribute a single vertex
    ids = np.full((n + 1, m + 1), -1, dtype=int)
    verts = []
    for i in range(n + 1):
        if collapsed[i]:
            ids[i, :] = len(verts)
            verts.append((t[i], gam[i]))
        else:
            for j in range(m + 1):
                ids[i, j] = len(verts)
                verts.append((t[i], gam[i] + gap[i] * j / m))
    vertices = np.array(verts)
    tris = []
    for i in range(n):
        li, ri = collapsed[i], collapsed[i + 1]
        if li and ri:
            raise GeometryError("two adjacent collapsed columns; refine htilde")
        if li:
            for j in range(m):
                tris.append((ids[i, 0], ids[i + 1, j], ids[i + 1, j + 1]))
        elif ri:
            for j in range(m):
                tris.append((ids[i, j], ids[i + 1, 0], ids[i, j + 1]))
        else:
            for j in range(m):
                bl, br = ids[i, j], ids[i + 1, j]
                tl, tr = ids[i, j + 1], ids[i + 1, j + 1]
                tris.append((bl, br, tl))
                tris.append((br, tr, tl))
    triangles = np.array(tris, dtype=int)
    # fix orientation (vertical grading never inverts, but keep it explicit)
    c = vertices[triangles]
    s = ((c[:, 1, 0] - c[:, 0, 0]) * (c[:, 2, 1] - c[:, 0, 1])
         - (c[:, 1, 1] - c[:, 0, 1]) * (c[:, 2, 0] - c[:, 0, 0]))
    flip = s < 0
    triangles[flip] = triangles[flip][:, ::-1]
    edges, tags = [], []
    for i in range(n):                       # bottom polyline: rough
        edges.append((ids[i, 0], ids[i + 1, 0]))
        tags.append(ROUGH)
    for i in range(n):                       # roof: Dirichlet
        edges.append((ids[i, m], ids[i + 1, m]))
        tags.append(DIRICHLET)
    for i in (0, n):                         # non-collapsed side columns
        if not collapsed[i]:
            for j in range(m):
                edges.append((ids[i, j], ids[i, j + 1]))
                tags.append(DIRICHLET)
    boundary_edges = np.array(edges, dtype=int)
    edge_tags = np.array(tags, dtype=int)
    cls = _classify(vertices, triangles, boundary_edges, edge_tags)
    corners = vertices[triangles]
    diam = max(np.linalg.norm(corners[:, p] - corners[:, q], axis=1).max()
               for p, q in ((0, 1), (1, 2), (2, 0)))
    mesh = TriMesh(vertices, triangles, boundary_edges, edge_tags, cls, float(diam))
    if np.any(mesh.areas() <= 0):
        raise MeshError("degenerate triangle in cell mesh")
    return mesh


# ---------------------------------------------------------------------------
# plain-text mesh serialization
# ---------------------------------------------------------------------------

def write_mesh(mesh: TriMesh, path: str) -> None:
    """Plain text: header, coordinate rows, index triples, tagged edges."""
    with open(path, "w") as f:
        f.write(f"vertices {mesh.num_vertices} / triangles {mesh.num_triangles}"
                f" / edges {len(mesh.boundary_edges)}\n")
        for x, y in mesh.vertices:
            f.write(f"{float(x)!r} {float(y)!r}\n")
        for a, b, c in mesh.triangles:
            f.write(f"{a} {b} {c}\n")
        for (a, b), tag in zip(mesh.boundary_edges, mesh.edge_tags):
            f.write(f"{a} {b} {tag}\n")


def read_mesh(path: str) -> TriMesh:
    with open(path) as f:
        head = f.readline().split()
        nv, nt, ne = int(head[1]), int(head[4]), int(head[7])
        vertices = np.array([[float(w) for w in f.readline().split()]
                             for _ in range(nv)])
        triangles = np.array([[int(w) for w in f.readline().split()]
                              for _ in range(nt)], dtype=int)
        rows = [[int(w) for w in f.readline().split()] for _ in range(ne)]
    boundary_edges = np.array([r[:2] for r in rows], dtype=int)
    edge_tags = np.array([r[2] for r in rows], dtype=int)
    cls = _classify(vertices, triangles, boundary_edges, edge_tags)
    corners = vertices[triangles]
    diam = max(np.linalg.norm(corners[:, p] - corners[:, q], axis=1).max()
               for p, q in ((0, 1), (1, 2), (2, 0)))
    return TriMesh(vertices, triangles, boundary_edges, edge_tags, cls, float(diam))

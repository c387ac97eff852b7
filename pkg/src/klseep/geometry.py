"""Differentiable maps from geometry parameters to mesh coordinates.

Two concrete maps: a 1D layered column whose 41-node template stretches
piecewise-linearly with the two interface depths, and a 2D square domain with
a circular cavity whose conforming O-grid deforms elastically from a fixed
reference mesh.  Both expose exact node sensitivities dZ/d2theta.

Because the cavity boundary positions are affine in (center, radius) and the
elastic operator lives on the reference mesh, the 2D move is an affine map:
three displacement fields are solved once at construction and every move is a
linear combination of them.
"""

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .errors import ConstraintViolation, DegenerateElement, MeshTangled
from .fem import Mesh, _QUAD_DSHAPES, _scatter_matrix  # noqa: F401
from . import fem


class ConstraintSet:
    """Strict linear inequalities a . theta < b with human-readable labels."""

    def __init__(self, rows):
        self.A = np.array([r[0] for r in rows], dtype=float)
        self.b = np.array([r[1] for r in rows], dtype=float)
        self.labels = [r[2] for r in rows]

    def margins(self, theta2):
        """b - A theta; positive everywhere iff feasible."""
        return self.b - self.A @ np.asarray(theta2, dtype=float)

    def check(self, theta2):
        m = self.margins(theta2)
        bad = [self.labels[i] for i in np.nonzero(m <= 0)[0]]
        return len(bad) == 0, bad

    def require(self, theta2):
        ok, bad = self.check(theta2)
        if not ok:
            raise ConstraintViolation(bad)


def check_constraints(cset, theta2):
    return cset.check(theta2)


def layer_constraints():
    return ConstraintSet(
        [
            ((-1.0, 0.0), -1.05, "1.05 < theta2[0]"),
            ((1.0, 0.0), 4.7, "theta2[0] < 4.7"),
            ((0.0, -1.0), -5.3, "5.3 < theta2[1]"),
            ((0.0, 1.0), 8.95, "theta2[1] < 8.95"),
        ]
    )


def cavity_constraints():
    return ConstraintSet(
        [
            ((1.0, 0.0, 0.5), 2.1, "theta2[0] + theta2[2]/2 < 2.1"),
            ((-1.0, 0.0, 0.5), 2.1, "-theta2[0] + theta2[2]/2 < 2.1"),
            ((0.0, 1.0, 0.5), 2.1, "theta2[1] + theta2[2]/2 < 2.1"),
            ((0.0, -1.0, 0.5), 2.1, "-theta2[1] + theta2[2]/2 < 2.1"),
            ((0.0, 0.0, -1.0), -0.1, "0.1 < theta2[2]"),
            ((0.0, 0.0, 1.0), 1.6, "theta2[2] < 1.6"),
        ]
    )


DEFAULT_SEGMENTS = (4, 8, 7, 2, 7, 8, 4)
LAYER_OBS_POINTS = np.array([0.25, 0.75, 4.75, 5.25, 9.25, 9.75])


def scaled_segment_counts(n_e, weights=DEFAULT_SEGMENTS):
    """Largest-remainder split of n_e elements over the seven column segments."""
    w = np.asarray(weights, dtype=float)
    quota = n_e * w / w.sum()
    counts = np.floor(quota).astype(int)
    rem = n_e - counts.sum()
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[:rem]] += 1
    if np.any(counts < 1):
        raise ValueError(f"n_e={n_e} too small to populate every segment")
    return tuple(int(c) for c in counts)


class LayerMap1D:
    """Column mesh template whose nodes are affine in (z_upper, z_lower).

    The column [0, 10] splits into seven bands with fixed endpoints
    0, 1, z_upper, 4.75, 5.25, z_lower, 9, 10 and a fixed element count per
    band; nodes are equispaced within each band.  The default counts give the
    41-node mesh; scaled variants keep the same proportions.  Every node is
    z = base + c1*z_upper + c2*z_lower, so the sensitivities are the constant
    vectors c1, c2.
    """

    def __init__(self, segment_counts=DEFAULT_SEGMENTS):
        counts = tuple(int(c) for c in segment_counts)
        if len(counts) != 7 or any(c < 1 for c in counts):
            raise ValueError("need seven positive segment counts")
        self.theta_ref = np.array([2.5, 7.5])
        # segment endpoints as (base, coef on z_upper, coef on z_lower)
        ends = np.array(
            [
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [4.75, 0.0, 0.0],
                [5.25, 0.0, 0.0],
                [0.0, 0.0, 1.0],
                [9.0, 0.0, 0.0],
                [10.0, 0.0, 0.0],
            ]
        )
        rows = [ends[0]]
        for s, c in enumerate(counts):
            f = (np.arange(1, c + 1) / c)[:, None]
            rows.append((1.0 - f) * ends[s] + f * ends[s + 1])
        table = np.vstack(rows)
        self.segment_counts = counts
        self.base = table[:, 0]
        self.coef = table[:, 1:]  # (n_nd, 2)
        self.n_elems = sum(counts)
        self.constraints = layer_constraints()
        c = np.cumsum((0,) + counts)
        self.clay_elements = np.arange(c[2], c[5])
        self.sand_elements = np.concatenate([np.arange(c[0], c[2]), np.arange(c[5], c[7])])

    @classmethod
    def scaled(cls, n_e):
        return cls(scaled_segment_counts(n_e))

    @property
    def n_nodes(self):
        return self.n_elems + 1

    def nodes(self, theta2):
        """Node coordinates and their (n_nd, 1, 2) sensitivities."""
        self.constraints.require(theta2)
        t = np.asarray(theta2, dtype=float)
        z = self.base + self.coef @ t
        return z, self.coef[:, None, :]

    def mesh(self, theta2):
        """FEM mesh with sand/clay element tags, plus node sensitivities."""
        z, dZ = self.nodes(theta2)
        m = fem.interval_mesh(z)
        m.elem_tags["sand"] = self.sand_elements
        m.elem_tags["clay"] = self.clay_elements
        return m, dZ


def layer_nodes(layer_map, theta2):
    return layer_map.nodes(theta2)


def circle_boundary(theta2, n=112, check=True):
    """Cavity boundary nodes and their d/d2theta columns.

    Node i (0-based) sits at angle 2 pi i / n; the three derivative columns
    are the unit center shifts and the radial direction.
    """
    t = np.asarray(theta2, dtype=float)
    if check:
        cavity_constraints().require(t)
    a = 2.0 * np.pi * np.arange(n) / n
    ca, sa = np.cos(a), np.sin(a)
    pts = np.column_stack([t[0] + t[2] * ca, t[1] + t[2] * sa])
    d = np.zeros((n, 2, 3))
    d[:, 0, 0] = 1.0
    d[:, 1, 1] = 1.0
    d[:, 0, 2] = ca
    d[:, 1, 2] = sa
    return pts, d


def ring_fractions(n_rings, ratio=4.0):
    """Radial blend fractions 0..1 with geometric growth of ring thickness."""
    if n_rings < 1:
        raise ValueError("need at least one ring of elements")
    if ratio == 1.0 or n_rings == 1:
        return np.linspace(0.0, 1.0, n_rings + 1)
    g = ratio ** (1.0 / (n_rings - 1))
    steps = g ** np.arange(n_rings)
    s = np.concatenate([[0.0], np.cumsum(steps)])
    return s / s[-1]


def square_projection(angles, half_width):
    """Points on the boundary of the centered square at the given ray angles."""
    ca, sa = np.cos(angles), np.sin(angles)
    scale = half_width / np.maximum(np.abs(ca), np.abs(sa))
    return np.column_stack([scale * ca, scale * sa])


def ogrid_mesh(
    n_rings=16,
    n_angular=112,
    half_width=4.0,
    cavity=(0.0, 0.0, 0.5),
    ring_ratio=1.0,
    waist=0.75,
    waist_gap=None,
    pinch_points=None,
    pinch_spread=12.0,
    pinch_halfwidth=1.0,
    fat_factor=1.0,
):
    """Conforming quad mesh between a circular cavity and the outer square.

    Rings of n_angular quads blend from the cavity circle to an intermediate
    square at waist * half_width, then on to the outer square; n_angular must
    be divisible by 8 so rays hit the corners exactly.  The element rings on
    either side of the waist are deliberately thin (waist_gap blend fractions):
    under Jacobian stiffening thin rings are stiff, so pinning observation
    nodes on the waist during mesh moving does not shear their neighborhood.
    When pinch_points are given the thin band is local: full thinness only
    within pinch_halfwidth angular steps of a pinch point's ray, widening by
    pinch_spread in between, so material can still bulge across the waist
    between pinned nodes.  Node id = ring * n_angular + angular index.
    Tags: cavity, outer, waist, and the four outer edges.
    """
    if n_angular % 8 != 0:
        raise ValueError("n_angular must be divisible by 8 to hit the corners")
    cx, cy, r = cavity
    a = 2.0 * np.pi * np.arange(n_angular) / n_angular
    inner = np.column_stack([cx + r * np.cos(a), cy + r * np.sin(a)])
    mid = square_projection(a, waist * half_width)
    outer = square_projection(a, half_width)

    if pinch_points is None:
        sigma = np.ones(n_angular)
    else:
        pts = np.atleast_2d(np.asarray(pinch_points, dtype=float))
        pin_idx = np.round(np.arctan2(pts[:, 1], pts[:, 0]) / (2.0 * np.pi) * n_angular)
        gap = np.abs(np.arange(n_angular)[:, None] - pin_idx[None, :])
        gap = np.minimum(gap, n_angular - gap).min(axis=1)
        ramp = np.clip(gap / pinch_halfwidth - 1.0, 0.0, 1.0)
        sigma = 1.0 + (pinch_spread - 1.0) * ramp**2

    n_out = max(1, round(n_rings * (1.0 - waist) / 1.35))
    n_in = n_rings - n_out
    if n_in < 1:
        n_in, n_out = n_rings, 0
    if waist_gap is None:
        # match regular ring spacing: no deliberately thin band at the waist
        waist_gap = (1.0 / n_in, 1.0 / max(n_out, 1))
    ga, gb = waist_gap[0] * sigma, waist_gap[1] * sigma
    # stage A: cavity -> waist square; the last ring is the (pinched) thin one.
    # The two rings before it are extra thick: under Jacobian stiffening they
    # are the softest, so compression from a cavity approaching a pinned node
    # is absorbed there, where there is the most material to give.
    if n_in > 2:
        w = ring_ratio ** (np.arange(n_in - 1) / max(n_in - 2, 1))
        w[-2:] *= fat_factor
        frac = np.concatenate([[0.0], np.cumsum(w)]) / w.sum()
        fa = frac[:, None] * (1.0 - ga)[None, :]
        fa = np.vstack([fa, np.ones(n_angular)])
    else:
        fa = np.linspace(0.0, 1.0, n_in + 1)[:, None] * np.ones(n_angular)[None, :]
    rings = [(1.0 - f)[:, None] * inner + f[:, None] * mid for f in fa]
    # stage B: waist square -> outer square, thin first ring then uniform
    if n_out >= 2:
        fb = np.vstack([gb] + [gb + (1.0 - gb) * j / (n_out - 1) for j in range(1, n_out)])
    elif n_out == 1:
        fb = np.ones((1, n_angular))
    else:
        fb = np.zeros((0, n_angular))
    rings.extend((1.0 - f)[:, None] * mid + f[:, None] * outer for f in fb)
    nodes = np.concatenate(rings, axis=0)
    waist_ring = n_in

    i = np.arange(n_angular)
    ip1 = (i + 1) % n_angular
    quads = []
    for j in range(n_rings):
        lo, hi = j * n_angular, (j + 1) * n_angular
        quads.append(np.column_stack([lo + i, hi + i, hi + ip1, lo + ip1]))
    elems = np.vstack(quads)

    last = n_rings * n_angular + i
    ext = nodes[last]
    tol = 1e-9 * half_width
    tags = {
        "cavity": i.copy(),
        "outer": last.copy(),
        "waist": waist_ring * n_angular + i,
        "right": last[np.abs(ext[:, 0] - half_width) < tol],
        "left": last[np.abs(ext[:, 0] + half_width) < tol],
        "top": last[np.abs(ext[:, 1] - half_width) < tol],
        "bottom": last[np.abs(ext[:, 1] + half_width) < tol],
    }
    return Mesh(nodes, elems, tags=tags)


def snap_to_nodes(mesh, points, forbid=None):
    """Nearest mesh node per point; raises if two points share a node."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    allowed = np.ones(mesh.n_nodes, dtype=bool)
    if forbid is not None:
        allowed[np.asarray(forbid, dtype=int)] = False
    cand = np.nonzero(allowed)[0]
    d2 = ((mesh.nodes[cand][None] - pts[:, None]) ** 2).sum(axis=2)
    ids = cand[np.argmin(d2, axis=1)]
    if np.unique(ids).size != ids.size:
        raise ValueError("two observation points snap to the same node")
    return ids


def locate_point(mesh, point, tol=1e-11, coords=None):
    """Element index and local (xi, eta) of a physical point on a quad mesh."""
    p = np.asarray(point, dtype=float)
    if coords is None:
        coords = mesh.element_coords()
    pad = 1e-9 + 1e-9 * np.abs(p).max()
    inside = np.all(coords.min(axis=1) <= p + pad, axis=1) & np.all(
        coords.max(axis=1) >= p - pad, axis=1
    )
    for e in np.nonzero(inside)[0]:
        xe = coords[e]
        xi = np.zeros(2)
        for _ in range(30):
            shp = fem._quad_shape(*xi)
            jac = fem._quad_dshape(*xi) @ xe
            resid = shp @ xe - p
            if np.abs(resid).max() < tol:
                break
            xi = xi - np.linalg.solve(jac.T, resid)
        if np.abs(resid).max() < tol and np.all(np.abs(xi) <= 1.0 + 1e-9):
            return int(e), xi
    raise ValueError(f"point {p.tolist()} not inside any element")


def _shape_batch(xi, eta):
    """Bilinear shape functions for array-valued local coordinates, (..., 4)."""
    return 0.25 * np.stack(
        [
            (1.0 - xi) * (1.0 - eta),
            (1.0 + xi) * (1.0 - eta),
            (1.0 + xi) * (1.0 + eta),
            (1.0 - xi) * (1.0 + eta),
        ],
        axis=-1,
    )


def _dshape_batch(xi, eta):
    """Reference-coordinate shape gradients, (..., 2, 4)."""
    one = np.ones_like(xi)
    row0 = 0.25 * np.stack([-(one - eta), one - eta, one + eta, -(one + eta)], axis=-1)
    row1 = 0.25 * np.stack([-(one - xi), -(one + xi), one + xi, one - xi], axis=-1)
    return np.stack([row0, row1], axis=-2)


def element_neighborhoods(mesh, points):
    """Candidate element sets for point location: the containing element of
    each point plus every element sharing a node with it, padded to a
    rectangular int array (m, kmax) by duplicating the lowest id.

    Meant for fixed physical points on a mesh whose topology never changes:
    locating on a moved mesh only needs to search this neighborhood.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    coords = mesh.element_coords()
    rows = []
    for p in pts:
        e, _ = locate_point(mesh, p, coords=coords)
        near = np.nonzero(np.isin(mesh.elems, mesh.elems[e]).any(axis=1))[0]
        rows.append(np.union1d(near, [e]))
    kmax = max(r.size for r in rows)
    cand = np.empty((len(rows), kmax), dtype=int)
    for i, r in enumerate(rows):
        cand[i, : r.size] = r
        cand[i, r.size:] = r[0]
    return cand


class _NeighborhoodMiss(Exception):
    """A point left its cached candidate elements; fall back to a full scan."""


def _interp_rows_batched(mesh, pts, unit_motion, cand, tol=1e-11):
    """Vectorized Newton point-location over per-point candidate elements."""
    m, k = cand.shape
    xe = mesh.nodes[mesh.elems[cand]]  # (m, k, 4, 2)
    xi = np.zeros((m, k, 2))
    good = np.zeros((m, k), dtype=bool)
    for _ in range(30):
        shp = _shape_batch(xi[..., 0], xi[..., 1])
        dshp = _dshape_batch(xi[..., 0], xi[..., 1])
        jac = np.einsum("mkab,mkbd->mkad", dshp, xe)
        resid = np.einsum("mka,mkad->mkd", shp, xe) - pts[:, None, :]
        ok = np.abs(resid).max(axis=-1) < tol
        good = ok & (np.abs(xi) <= 1.0 + 1e-9).all(axis=-1)
        if good.any(axis=1).all():
            break
        # solve jac.T delta = resid analytically; dead (singular) candidates
        # get an infinite determinant so their update is zero
        a, b = jac[..., 0, 0], jac[..., 1, 0]
        c, d = jac[..., 0, 1], jac[..., 1, 1]
        det = a * d - b * c
        det = np.where(np.abs(det) < 1e-300, np.inf, det)
        dx = (d * resid[..., 0] - b * resid[..., 1]) / det
        dy = (a * resid[..., 1] - c * resid[..., 0]) / det
        xi[..., 0] -= dx
        xi[..., 1] -= dy
        np.clip(xi, -1e3, 1e3, out=xi)
    if not good.any(axis=1).all():
        raise _NeighborhoodMiss
    # candidates are sorted ascending, so the first hit is the lowest element
    # id, matching the full-scan order
    sel = np.argmax(good, axis=1)
    rows = np.arange(m)
    esel = cand[rows, sel]
    conn = mesh.elems[esel]  # (m, 4)
    xsel = xi[rows, sel]  # (m, 2)
    w = _shape_batch(xsel[:, 0], xsel[:, 1])
    if unit_motion is None:
        return conn, w, None
    dshp = _dshape_batch(xsel[:, 0], xsel[:, 1])  # (m, 2, 4)
    jac = np.einsum("mab,mbd->mad", dshp, mesh.nodes[conn])
    S = np.einsum("ma,madk->mdk", w, unit_motion[conn])  # (m, 2, M2)
    a, b = jac[:, 0, 0], jac[:, 1, 0]
    c, d = jac[:, 0, 1], jac[:, 1, 1]
    det = (a * d - b * c)[:, None]
    dxi = np.empty_like(S)
    dxi[:, 0] = -(d[:, None] * S[:, 0] - b[:, None] * S[:, 1]) / det
    dxi[:, 1] = -(a[:, None] * S[:, 1] - c[:, None] * S[:, 0]) / det
    dw = np.einsum("mdi,mdk->mik", dshp, dxi)
    return conn, w, dw


def interp_head_rows(mesh, points, unit_motion=None, candidates=None):
    """Interpolation stencils for nodal heads at fixed physical points.

    Returns (cols, w, dw): element corner node ids (m, 4), shape-function
    weights (m, 4), and, when the mesh's node motion field is given, the
    derivative of the weights w.r.t. the three geometry parameters (m, 4, 3).
    The weights reconstruct values at points that stay put while the mesh
    moves underneath, so dw accounts for the local coordinates shifting:
    d(xi)/dtheta = -J^{-1} sum_a N_a u_a.

    candidates, when given (see element_neighborhoods), restricts the element
    search per point; the full mesh scan is the fallback.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if candidates is not None:
        try:
            return _interp_rows_batched(mesh, pts, unit_motion, candidates)
        except _NeighborhoodMiss:
            pass
    m = pts.shape[0]
    cols = np.empty((m, 4), dtype=int)
    w = np.empty((m, 4))
    dw = np.empty((m, 4, 3)) if unit_motion is not None else None
    coords = mesh.element_coords()
    for i, p in enumerate(pts):
        e, xi = locate_point(mesh, p, coords=coords)
        conn = mesh.elems[e]
        shp = fem._quad_shape(*xi)
        cols[i] = conn
        w[i] = shp
        if unit_motion is not None:
            dshp = fem._quad_dshape(*xi)
            jac = dshp @ mesh.nodes[conn]
            dxi = -np.linalg.solve(jac.T, np.einsum("a,adm->dm", shp, unit_motion[conn]))
            dw[i] = dshp.T @ dxi
    return cols, w, dw


def lattice_ring_points(radius=3, drop=((0, 3), (0, -3))):
    """Integer lattice points on the max-norm ring, minus the dropped ones."""
    pts = []
    for x in range(-radius, radius + 1):
        for y in range(-radius, radius + 1):
            if max(abs(x), abs(y)) == radius and (x, y) not in drop:
                pts.append((float(x), float(y)))
    return np.array(pts)


def right_edge_sections(mesh, n_sections=8, half_width=4.0):
    """Right-edge nodes grouped into equal-height bands, bottom to top."""
    nodes = mesh.tags["right"]
    ys = mesh.nodes[nodes, 1]
    height = 2.0 * half_width / n_sections
    idx = np.clip(((ys + half_width) / height).astype(int), 0, n_sections - 1)
    return [nodes[idx == j] for j in range(n_sections)]


def _elastic_stiffness(mesh, youngs, poisson, chi, j0):
    """Plane-strain Q4 stiffness with Jacobian stiffening, (2n x 2n) CSR."""
    E, nu = youngs, poisson
    fac = E / ((1.0 + nu) * (1.0 - 2.0 * nu))
    D = fac * np.array(
        [
            [1.0 - nu, nu, 0.0],
            [nu, 1.0 - nu, 0.0],
            [0.0, 0.0, 0.5 * (1.0 - 2.0 * nu)],
        ]
    )
    Ze = mesh.element_coords()
    n_e = mesh.n_elems
    Ke = np.zeros((n_e, 8, 8))
    for dN in _QUAD_DSHAPES:
        J = np.einsum("ab,ebc->eac", dN, Ze)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        if np.any(det <= 0):
            raise MeshTangled("reference mesh has non-positive Jacobians")
        Jinv = np.empty_like(J)
        Jinv[:, 0, 0] = J[:, 1, 1]
        Jinv[:, 1, 1] = J[:, 0, 0]
        Jinv[:, 0, 1] = -J[:, 0, 1]
        Jinv[:, 1, 0] = -J[:, 1, 0]
        Jinv /= det[:, None, None]
        Bg = np.einsum("eab,bi->eai", Jinv, dN)  # (n_e, 2, 4)
        B = np.zeros((n_e, 3, 8))
        B[:, 0, 0::2] = Bg[:, 0]
        B[:, 1, 1::2] = Bg[:, 1]
        B[:, 2, 0::2] = Bg[:, 1]
        B[:, 2, 1::2] = Bg[:, 0]
        scale = det * (j0 / det) ** chi
        Ke += scale[:, None, None] * np.einsum("eai,ab,ebj->eij", B, D, B)
    dofs = np.empty((n_e, 8), dtype=int)
    dofs[:, 0::2] = 2 * mesh.elems
    dofs[:, 1::2] = 2 * mesh.elems + 1
    rows = np.repeat(dofs, 8, axis=1).ravel()
    cols = np.tile(dofs, (1, 8)).ravel()
    n = 2 * mesh.n_nodes
    return scipy.sparse.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()


class ReferenceMesh2D:
    """Fixed O-grid plus the cached elastic responses that move it.

    The cavity boundary displacement is affine in (z1c, z2c, r), so one
    factorization of the stiffened elasticity operator yields three unit
    displacement fields; every move is reference + delta . units.  Only the
    cavity circle (prescribed) and the outer boundary (zero) are constrained.

    Observation points are fixed physical coordinates: the mesh deforms
    underneath them and obs_rows() rebuilds interpolation stencils (with
    exact theta2 derivatives) on each moved mesh.
    """

    def __init__(
        self,
        n_rings=16,
        n_angular=112,
        half_width=4.0,
        cavity_ref=(0.0, 0.0, 0.5),
        obs_points=None,
        ring_ratio=8.0,
        fat_factor=1.6,
        youngs=2500.0,
        poisson=0.25,
        chi=1.0,
        j0=1.0,
    ):
        self.theta_ref = np.asarray(cavity_ref, dtype=float)
        self.constraints = cavity_constraints()
        self.constraints.require(self.theta_ref)
        self.mesh = ogrid_mesh(
            n_rings, n_angular, half_width, tuple(self.theta_ref), ring_ratio,
            fat_factor=fat_factor,
        )
        self.n_angular = n_angular
        self.half_width = half_width
        self.cavity_nodes = self.mesh.tags["cavity"]
        self.outer_nodes = self.mesh.tags["outer"]
        self.obs_points = None if obs_points is None else np.atleast_2d(
            np.asarray(obs_points, dtype=float)
        ).copy()
        self._obs_candidates = (
            None
            if self.obs_points is None
            else element_neighborhoods(self.mesh, self.obs_points)
        )
        self.unit_motion = self._solve_unit_motion(youngs, poisson, chi, j0)

    def _solve_unit_motion(self, youngs, poisson, chi, j0):
        Kel = _elastic_stiffness(self.mesh, youngs, poisson, chi, j0)
        n = self.mesh.n_nodes
        _, dcols = circle_boundary(self.theta_ref, n=self.n_angular)
        U = np.zeros((n, 2, 3))
        U[self.cavity_nodes] = dcols
        fixed_nodes = np.concatenate([self.cavity_nodes, self.outer_nodes])
        fixed = np.sort(np.concatenate([2 * fixed_nodes, 2 * fixed_nodes + 1]))
        mask = np.ones(2 * n, dtype=bool)
        mask[fixed] = False
        free = np.nonzero(mask)[0]
        Kf = Kel[free]
        lu = scipy.sparse.linalg.splu(Kf[:, free].tocsc())
        rhs = -(Kf[:, fixed] @ U.reshape(2 * n, 3)[fixed])
        U.reshape(2 * n, 3)[free] = lu.solve(rhs)
        return U

    def move(self, theta2, check=True, with_geometry=False):
        """Moved mesh and its node sensitivities (n_nd, 2, 3).

        with_geometry additionally returns fem.quad_geometry(moved) so the
        tangling check and assembly share one Jacobian evaluation.
        """
        t = np.asarray(theta2, dtype=float)
        if check:
            self.constraints.require(t)
        delta = t - self.theta_ref
        nodes = self.mesh.nodes + self.unit_motion @ delta
        moved = self.mesh.with_nodes(nodes)
        if with_geometry:
            try:
                geom = fem.quad_geometry(moved)
            except DegenerateElement as exc:
                raise MeshTangled(f"mesh inverted at theta2={t.tolist()}") from exc
            return moved, self.unit_motion, geom
        if np.min(fem.jacobian_dets(moved)) <= 0.0:
            raise MeshTangled(f"mesh inverted at theta2={t.tolist()}")
        return moved, self.unit_motion

    def obs_rows(self, moved):
        """Head-observation stencils on a moved mesh: (cols, w, dw)."""
        if self.obs_points is None:
            raise ValueError("reference mesh was built without observation points")
        return interp_head_rows(
            moved, self.obs_points, self.unit_motion,
            candidates=self._obs_candidates,
        )


def move_mesh(ref, theta2):
    return ref.move(theta2)

"""Steady Darcy-flow finite elements.

Linear two-node elements in 1D and bilinear quadrilaterals in 2D, with
2-point Gauss integration per axis.  Conductivity is constant within each
element (evaluated at the centroid by the caller).  Dirichlet conditions are
enforced by row/column elimination so that boundary fluxes can be recovered
exactly as q = K h - f on the constrained rows; ``flux`` therefore holds the
external supply *into* the domain at each Dirichlet node.

Besides the general sparse route there is a tridiagonal fast path used by the
1D samplers: the interior block is factorized once (Cholesky, banded) and
reused for every right-hand side of the direct differentiation method.
"""

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import DegenerateElement, SingularSystem

_GAUSS_1D = np.array([-1.0, 1.0]) / np.sqrt(3.0)


def _quad_dshape(xi, eta):
    """Reference-coordinate shape gradients of the bilinear quad, (2, 4)."""
    return 0.25 * np.array(
        [
            [-(1.0 - eta), (1.0 - eta), (1.0 + eta), -(1.0 + eta)],
            [-(1.0 - xi), -(1.0 + xi), (1.0 + xi), (1.0 - xi)],
        ]
    )


def _quad_shape(xi, eta):
    return 0.25 * np.array(
        [
            (1.0 - xi) * (1.0 - eta),
            (1.0 + xi) * (1.0 - eta),
            (1.0 + xi) * (1.0 + eta),
            (1.0 - xi) * (1.0 + eta),
        ]
    )


_QUAD_GPS = [(xi, eta) for eta in _GAUSS_1D for xi in _GAUSS_1D]
_QUAD_DSHAPES = [_quad_dshape(xi, eta) for xi, eta in _QUAD_GPS]
_QUAD_SHAPES = [_quad_shape(xi, eta) for xi, eta in _QUAD_GPS]
_QUAD_DN = np.stack(_QUAD_DSHAPES)  # (n_gp, 2, 4)


def quad_geometry(mesh):
    """Per-Gauss-point isoparametric geometry of a quad mesh.

    Returns (B, det): mapped shape gradients (n_gp, n_e, 2, 4) and Jacobian
    determinants (n_gp, n_e).  Computed once per mesh and shared between
    assembly and the derivative products, which is what the sampler hot path
    wants.  Raises DegenerateElement on non-positive determinants.
    """
    Ze = mesh.element_coords()
    J = np.einsum("gab,ebc->geac", _QUAD_DN, Ze)
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    if np.any(det <= 0):
        raise DegenerateElement("non-positive Jacobian determinant")
    Jinv = np.empty_like(J)
    Jinv[..., 0, 0] = J[..., 1, 1]
    Jinv[..., 1, 1] = J[..., 0, 0]
    Jinv[..., 0, 1] = -J[..., 0, 1]
    Jinv[..., 1, 0] = -J[..., 1, 0]
    Jinv /= det[..., None, None]
    B = np.einsum("geab,gbi->geai", Jinv, _QUAD_DN)
    return B, det


class Mesh:
    """Nodes, connectivity and named boundary/element groups.

    nodes : (n_nd, d) coordinates in meters
    elems : (n_e, 2) in 1D or (n_e, 4) counterclockwise in 2D
    tags  : name -> node index array (boundary groups)
    elem_tags : name -> element index array
    """

    def __init__(self, nodes, elems, tags=None, elem_tags=None):
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        elems = np.asarray(elems, dtype=int)
        if nodes.ndim != 2 or elems.ndim != 2:
            raise ValueError("nodes must be (n_nd, d), elems (n_e, npe)")
        d = nodes.shape[1]
        npe = elems.shape[1]
        if (d, npe) not in ((1, 2), (2, 4)):
            raise ValueError(f"unsupported element type: dim={d}, nodes/elem={npe}")
        if elems.min(initial=0) < 0 or elems.max(initial=-1) >= nodes.shape[0]:
            raise ValueError("connectivity index out of range")
        self.nodes = nodes
        self.elems = elems
        self.dim = d
        self.tags = {k: np.asarray(v, dtype=int) for k, v in (tags or {}).items()}
        self.elem_tags = {
            k: np.asarray(v, dtype=int) for k, v in (elem_tags or {}).items()
        }

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elems(self):
        return self.elems.shape[0]

    def element_coords(self):
        """Per-element node coordinates, (n_e, npe, d)."""
        return self.nodes[self.elems]

    def centroids(self):
        return self.element_coords().mean(axis=1)

    def with_nodes(self, nodes):
        """Same topology on new coordinates (tags are shared, not copied)."""
        return Mesh(nodes, self.elems, tags=self.tags, elem_tags=self.elem_tags)


def interval_mesh(z_nodes):
    """1D mesh from ascending node coordinates; tags 'top' (first) and 'bottom'."""
    z = np.asarray(z_nodes, dtype=float).ravel()
    if z.size < 2 or np.any(np.diff(z) <= 0):
        raise ValueError("need at least two strictly increasing coordinates")
    n = z.size
    elems = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    return Mesh(z[:, None], elems, tags={"top": [0], "bottom": [n - 1]})


def structured_rect_mesh(nx, ny, box):
    """Structured quad mesh of nx-by-ny elements on box = ((x0, y0), (x1, y1)).

    Edge node tags: 'left', 'right', 'bottom', 'top' (corners belong to both
    adjacent edges).
    """
    (x0, y0), (x1, y1) = box
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)  # row j = constant y
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    n0 = (j * (nx + 1) + i).ravel()
    elems = np.column_stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1])
    idx = np.arange(nodes.shape[0]).reshape(ny + 1, nx + 1)
    tags = {
        "left": idx[:, 0],
        "right": idx[:, -1],
        "bottom": idx[0, :],
        "top": idx[-1, :],
    }
    return Mesh(nodes, elems, tags=tags)


class BCSet:
    """Dirichlet values plus optional Neumann face fluxes and element sources.

    dirichlet : (nodes, values) with values scalar or per-node
    neumann   : list of (faces, q) where faces is (m, 2) node pairs in 2D or
                (m,) node indices in 1D, and q (m/s) is positive into the domain
    source    : per-element volumetric source Q (1/s), default zero
    """

    def __init__(self, dirichlet, neumann=None, source=None):
        nodes_list, vals_list = [], []
        for nodes, values in dirichlet:
            nodes = np.atleast_1d(np.asarray(nodes, dtype=int))
            values = np.broadcast_to(np.asarray(values, dtype=float), nodes.shape)
            nodes_list.append(nodes)
            vals_list.append(values)
        nodes = np.concatenate(nodes_list) if nodes_list else np.empty(0, dtype=int)
        values = np.concatenate(vals_list) if vals_list else np.empty(0)
        order = np.argsort(nodes, kind="stable")
        nodes, values = nodes[order], values[order]
        if nodes.size > 1:
            dup = nodes[1:] == nodes[:-1]
            if np.any(values[1:][dup] != values[:-1][dup]):
                raise ValueError("conflicting Dirichlet values on a node")
        uniq, first = np.unique(nodes, return_index=True)
        self.dirichlet_nodes = uniq
        self.dirichlet_values = values[first]
        self.neumann = []
        if neumann:
            dset = set(self.dirichlet_nodes.tolist())
            for faces, q in neumann:
                faces = np.asarray(faces, dtype=int)
                if dset.intersection(faces.ravel().tolist()):
                    raise ValueError("Neumann face touches a Dirichlet node")
                self.neumann.append((faces, np.asarray(q, dtype=float)))
        self.source = None if source is None else np.asarray(source, dtype=float)


def element_matrices(mesh, k_e=None, geom=None):
    """Element stiffness matrices, (n_e, npe, npe).

    With k_e omitted these are the unit-conductivity matrices; the physical
    matrices are k_e times them.  geom is an optional precomputed
    quad_geometry(mesh).  Raises DegenerateElement if any Jacobian
    determinant is non-positive.
    """
    if mesh.dim == 1:
        Ze = mesh.element_coords()
        L = Ze[:, 1, 0] - Ze[:, 0, 0]
        if np.any(L <= 0):
            raise DegenerateElement("non-positive 1D element length")
        stencil = np.array([[1.0, -1.0], [-1.0, 1.0]])
        Ke = stencil[None, :, :] / L[:, None, None]
    else:
        B, det = quad_geometry(mesh) if geom is None else geom
        # per-Gauss-point accumulation keeps K exactly symmetric (the i,j and
        # j,i sums see identical products in identical order)
        Ke = np.zeros((mesh.n_elems, 4, 4))
        for g in range(B.shape[0]):
            Ke += det[g][:, None, None] * np.einsum("eai,eaj->eij", B[g], B[g])
    if k_e is not None:
        Ke = Ke * np.asarray(k_e, dtype=float)[:, None, None]
    return Ke


def jacobian_dets(mesh):
    """Jacobian determinants at the Gauss points, (n_e, n_gp); no sign check."""
    Ze = mesh.element_coords()
    if mesh.dim == 1:
        return 0.5 * (Ze[:, 1, 0] - Ze[:, 0, 0])[:, None]
    dets = np.empty((mesh.n_elems, len(_QUAD_DSHAPES)))
    for g, dN in enumerate(_QUAD_DSHAPES):
        J = np.einsum("ab,ebc->eac", dN, Ze)
        dets[:, g] = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    return dets


def assemble(mesh, k_e, element_mats=None):
    """Global conductance matrix K (CSR), symmetric PSD with zero row sums."""
    k_e = np.asarray(k_e, dtype=float)
    if k_e.shape != (mesh.n_elems,):
        raise ValueError("k_e must be per-element")
    if np.any(k_e <= 0):
        raise ValueError("conductivities must be positive")
    Ke = element_matrices(mesh) if element_mats is None else element_mats
    Ke = Ke * k_e[:, None, None]
    return _scatter_matrix(mesh, Ke)


def _scatter_matrix(mesh, Ke):
    npe = mesh.elems.shape[1]
    rows = np.repeat(mesh.elems, npe, axis=1).ravel()
    cols = np.tile(mesh.elems, (1, npe)).ravel()
    n = mesh.n_nodes
    K = scipy.sparse.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))
    return K.tocsr()


def load_vector(mesh, bcs):
    """Consistent load vector from Neumann fluxes and element sources."""
    f = np.zeros(mesh.n_nodes)
    for faces, q in bcs.neumann:
        if mesh.dim == 1:
            np.add.at(f, faces, q)
        else:
            pts = mesh.nodes[faces]  # (m, 2, 2)
            length = np.linalg.norm(pts[:, 1] - pts[:, 0], axis=1)
            contrib = 0.5 * np.broadcast_to(q, length.shape) * length
            np.add.at(f, faces[:, 0], contrib)
            np.add.at(f, faces[:, 1], contrib)
    if bcs.source is not None:
        Q = np.broadcast_to(bcs.source, (mesh.n_elems,))
        Ze = mesh.element_coords()
        if mesh.dim == 1:
            half = 0.5 * Q * (Ze[:, 1, 0] - Ze[:, 0, 0])
            np.add.at(f, mesh.elems[:, 0], half)
            np.add.at(f, mesh.elems[:, 1], half)
        else:
            fe = np.zeros((mesh.n_elems, 4))
            for dN, N in zip(_QUAD_DSHAPES, _QUAD_SHAPES):
                J = np.einsum("ab,ebc->eac", dN, Ze)
                det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
                fe += (Q * det)[:, None] * N[None, :]
            np.add.at(f, mesh.elems.ravel(), fe.ravel())
    return f


class SolveResult:
    """Nodal heads plus recovered fluxes at the Dirichlet nodes.

    ``flux[i]`` is (K h - f) at dirichlet_nodes[i]: the external inflow needed
    to hold that head.  The factorization of the free-node block is kept so
    that state gradients reuse it.
    """

    def __init__(self, heads, flux, dirichlet_nodes, free, K, f, lu):
        self.heads = heads
        self.flux = flux
        self.dirichlet_nodes = dirichlet_nodes
        self.free = free
        self.K = K
        self.f = f
        self._lu = lu

    @property
    def state(self):
        """The observation-operator state vector x = [h, q]."""
        return np.concatenate([self.heads, self.flux])

    def solve_free(self, rhs):
        """Back-substitute on the free-node block; rhs (n_free,) or (n_free, m)."""
        return self._lu(rhs)


def solve(K, bcs, f=None):
    """Direct solve with row/column elimination of Dirichlet nodes."""
    n = K.shape[0]
    fixed = bcs.dirichlet_nodes
    if fixed.size == 0:
        raise SingularSystem("no Dirichlet nodes: system has a constant null space")
    if f is None:
        f = np.zeros(n)
    mask = np.ones(n, dtype=bool)
    mask[fixed] = False
    free = np.nonzero(mask)[0]
    h = np.zeros(n)
    h[fixed] = bcs.dirichlet_values
    Kf = K[free]
    rhs = f[free] - Kf[:, fixed] @ bcs.dirichlet_values
    try:
        lu = scipy.sparse.linalg.splu(Kf[:, free].tocsc())
    except RuntimeError as exc:
        raise SingularSystem(str(exc)) from exc
    h[free] = lu.solve(rhs)
    flux = (K[fixed] @ h) - f[fixed]
    return SolveResult(h, flux, fixed, free, K, f, lu.solve)


def observe(result, H):
    """Predicted measurements H x with x = [heads, dirichlet fluxes]."""
    return np.asarray(H) @ result.state


def interp_row_1d(z_nodes, z):
    """Linear interpolation weights over 1D mesh nodes for a point head row."""
    z_nodes = np.asarray(z_nodes, dtype=float).ravel()
    if not (z_nodes[0] <= z <= z_nodes[-1]):
        raise ValueError("interpolation point outside the mesh")
    j = int(np.clip(np.searchsorted(z_nodes, z) - 1, 0, z_nodes.size - 2))
    w = np.zeros(z_nodes.size)
    t = (z - z_nodes[j]) / (z_nodes[j + 1] - z_nodes[j])
    w[j] = 1.0 - t
    w[j + 1] = t
    return w


def selection_row(n, idx, weight=1.0):
    row = np.zeros(n)
    row[idx] = weight
    return row


def assemble_grads(mesh, k_e, dk_dtheta1=None, dk_dtheta2=None, dZ_d2theta=None):
    """Global matrix derivatives w.r.t. field and geometry parameters.

    dk_dtheta1 : (n_e, M1) conductivity sensitivities to the field coefficients
    dk_dtheta2 : (n_e, M2) conductivity sensitivities to the geometry (through
                 the moving evaluation points)
    dZ_d2theta : (n_nd, d, M2) node-coordinate sensitivities

    Returns (dK1, dK2): lists of CSR matrices, one per parameter.  Geometry
    derivatives combine the conductivity move term with the mesh-motion term
    dB = -B (dZ_e) B and d|J| = |J| tr(B dZ_e).
    """
    k_e = np.asarray(k_e, dtype=float)
    Ke0 = element_matrices(mesh)
    dK1 = []
    if dk_dtheta1 is not None:
        dk1 = np.asarray(dk_dtheta1, dtype=float)
        for i in range(dk1.shape[1]):
            dK1.append(_scatter_matrix(mesh, dk1[:, i][:, None, None] * Ke0))
    dK2 = []
    if dZ_d2theta is not None:
        dZ = np.asarray(dZ_d2theta, dtype=float)
        M2 = dZ.shape[2]
        dk2 = (
            np.zeros((mesh.n_elems, M2))
            if dk_dtheta2 is None
            else np.asarray(dk_dtheta2, dtype=float)
        )
        dKe0 = geometric_element_grads(mesh, dZ)
        for m in range(M2):
            dKe = dk2[:, m][:, None, None] * Ke0 + k_e[:, None, None] * dKe0[m]
            dK2.append(_scatter_matrix(mesh, dKe))
    return dK1, dK2


def geometric_element_grads(mesh, dZ_d2theta):
    """Derivatives of the unit-conductivity element matrices w.r.t. mesh motion.

    Returns (M2, n_e, npe, npe).
    """
    dZ = np.asarray(dZ_d2theta, dtype=float)
    M2 = dZ.shape[2]
    Ze = mesh.element_coords()
    dZe = dZ[mesh.elems]  # (n_e, npe, d, M2)
    if mesh.dim == 1:
        L = Ze[:, 1, 0] - Ze[:, 0, 0]
        dL = dZe[:, 1, 0, :] - dZe[:, 0, 0, :]  # (n_e, M2)
        stencil = np.array([[1.0, -1.0], [-1.0, 1.0]])
        out = -(dL.T / L**2)[:, :, None, None] * stencil[None, None, :, :]
        return out
    out = np.zeros((M2, mesh.n_elems, 4, 4))
    for dN in _QUAD_DSHAPES:
        J = np.einsum("ab,ebc->eac", dN, Ze)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        Jinv = np.empty_like(J)
        Jinv[:, 0, 0] = J[:, 1, 1]
        Jinv[:, 1, 1] = J[:, 0, 0]
        Jinv[:, 0, 1] = -J[:, 0, 1]
        Jinv[:, 1, 0] = -J[:, 1, 0]
        Jinv /= det[:, None, None]
        B = np.einsum("eab,bi->eai", Jinv, dN)  # (n_e, 2, 4)
        BtB = np.einsum("eai,eaj->eij", B, B)
        for m in range(M2):
            BdZ = np.einsum("eai,eib->eab", B, dZe[:, :, :, m])  # (n_e, 2, 2)
            dB = -np.einsum("eab,ebi->eai", BdZ, B)
            ddet = det * np.einsum("eaa->e", BdZ)
            term = np.einsum("eai,eaj->eij", dB, B)
            out[m] += det[:, None, None] * (term + term.transpose(0, 2, 1))
            out[m] += ddet[:, None, None] * BtB
    return out


def grad_products(
    mesh, k_e, h, dk_dtheta1=None, dk_dtheta2=None, dZ_d2theta=None, geom=None
):
    """Matrix-free (dK/dtheta) h for all parameters at once, (n_nd, M1 + M2).

    Equivalent to stacking dK @ h over the assemble_grads output but without
    building the sparse matrices; this is the sampler hot path.  On quad
    meshes every 4x4 element tensor is contracted against h element-wise
    (never materialized), reusing geom = quad_geometry(mesh) when given.
    """
    k_e = np.asarray(k_e, dtype=float)
    he = h[mesh.elems]  # (n_e, npe)
    if mesh.dim == 2:
        B, det = quad_geometry(mesh) if geom is None else geom
        Bh = np.einsum("geai,ei->gea", B, he)
        Ke0he = np.einsum("geai,gea->ei", B, det[..., None] * Bh)
    else:
        Ke0he = np.einsum("eij,ej->ei", element_matrices(mesh), he)
    cols = []
    if dk_dtheta1 is not None:
        dk1 = np.asarray(dk_dtheta1, dtype=float)
        cols.append(Ke0he[:, :, None] * dk1[:, None, :])  # (n_e, npe, M1)
    if dZ_d2theta is not None:
        dZ = np.asarray(dZ_d2theta, dtype=float)
        M2 = dZ.shape[2]
        dk2 = (
            np.zeros((mesh.n_elems, M2))
            if dk_dtheta2 is None
            else np.asarray(dk_dtheta2, dtype=float)
        )
        if mesh.dim == 2:
            # dKe0 h = B^T [ det (tr(BdZ) I - BdZ - BdZ^T) Bh ] per Gauss point
            dZe = dZ[mesh.elems]  # (n_e, npe, 2, M2)
            BdZ = np.einsum("geai,eibm->geabm", B, dZe)
            tr = np.einsum("geaam->gem", BdZ)
            SBh = np.einsum("geabm,geb->geam", BdZ, Bh) + np.einsum(
                "gebam,geb->geam", BdZ, Bh
            )
            w = det[..., None, None] * (tr[:, :, None, :] * Bh[..., None] - SBh)
            geo = np.einsum("geai,geam->eim", B, w) * k_e[:, None, None]
        else:
            dKe0 = geometric_element_grads(mesh, dZ)
            geo = np.einsum("meij,ej->eim", dKe0, he) * k_e[:, None, None]
        cols.append(Ke0he[:, :, None] * dk2[:, None, :] + geo)
    if not cols:
        return np.zeros((mesh.n_nodes, 0))
    contrib = np.concatenate(cols, axis=2)  # (n_e, npe, P)
    P = contrib.shape[2]
    if P == 0:
        return np.zeros((mesh.n_nodes, P))
    idx = (mesh.elems.ravel()[:, None] * P + np.arange(P)).ravel()
    out = np.bincount(
        idx, weights=contrib.reshape(-1, P).ravel(), minlength=mesh.n_nodes * P
    )
    return out.reshape(mesh.n_nodes, P)


def state_grad_from_products(result, Y, dq_dtheta=None):
    """State sensitivities from precomputed Y[:, p] = (dK/dtheta_p) h.

    Solves K dh = dq - Y on the free block (one batched back-substitution) and
    differentiates the Dirichlet fluxes.  Returns (dh (n_nd, P), dflux (k, P)).
    """
    Y = np.asarray(Y, dtype=float)
    n, P = Y.shape
    rhs = -Y if dq_dtheta is None else np.asarray(dq_dtheta) - Y
    dh = np.zeros((n, P))
    if P:
        dh[result.free] = result.solve_free(rhs[result.free])
    fixed = result.dirichlet_nodes
    dflux = Y[fixed] + result.K[fixed] @ dh
    if dq_dtheta is not None:
        dflux = dflux - np.asarray(dq_dtheta)[fixed]
    return dh, dflux


def state_grad(K, result, dK_dtheta, dq_dtheta=None):
    """DDM sensitivities from explicit derivative matrices (list of (n, n))."""
    h = result.heads
    Y = np.column_stack([dK @ h for dK in dK_dtheta]) if dK_dtheta else np.zeros(
        (K.shape[0], 0)
    )
    return state_grad_from_products(result, Y, dq_dtheta=dq_dtheta)


class TridiagSystem:
    """1D fast path: Dirichlet at both end nodes, Cholesky-banded interior.

    Assembles the tridiagonal conductance matrix from element conductances
    g_e = k_e / L_e, factorizes the interior block once, and provides the
    matvec and multi-RHS solves the direct differentiation method needs.
    """

    def __init__(self, z_nodes, k_e):
        z = np.asarray(z_nodes, dtype=float).ravel()
        L = np.diff(z)
        if np.any(L <= 0):
            raise DegenerateElement("non-positive 1D element length")
        g = np.asarray(k_e, dtype=float) / L
        n = z.size
        diag = np.zeros(n)
        diag[:-1] += g
        diag[1:] += g
        self.n = n
        self.diag = diag
        self.off = -g
        ab = np.zeros((2, n - 2))
        ab[0, 1:] = self.off[1:-1]
        ab[1] = diag[1:-1]
        try:
            self._cb = scipy.linalg.cholesky_banded(ab, lower=False)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(str(exc)) from exc

    def matvec(self, h):
        """Full tridiagonal product K h; h (n,) or (n, m)."""
        y = self.diag[:, None] * h if h.ndim > 1 else self.diag * h
        if h.ndim > 1:
            y[:-1] += self.off[:, None] * h[1:]
            y[1:] += self.off[:, None] * h[:-1]
        else:
            y[:-1] += self.off * h[1:]
            y[1:] += self.off * h[:-1]
        return y

    def solve_free(self, rhs):
        """Interior solve; rhs (n-2,) or (n-2, m)."""
        return scipy.linalg.cho_solve_banded((self._cb, False), rhs)

    def solve_dirichlet(self, h_top, h_bot):
        """Heads with h[0] = h_top, h[-1] = h_bot; returns (h, flux at ends)."""
        # += so the two boundary contributions stack when n == 3 and the
        # interior is a single node
        rhs = np.zeros(self.n - 2)
        rhs[0] += -self.off[0] * h_top
        rhs[-1] += -self.off[-1] * h_bot
        h = np.empty(self.n)
        h[0] = h_top
        h[-1] = h_bot
        h[1:-1] = self.solve_free(rhs)
        flux = np.array(
            [
                self.diag[0] * h[0] + self.off[0] * h[1],
                self.off[-1] * h[-2] + self.diag[-1] * h[-1],
            ]
        )
        return h, flux


def save_mesh(mesh, path):
    """Plain text: header, node coordinates, connectivity, tag lines."""
    lines = ["klseep-mesh 1", f"dim {mesh.dim}", f"nodes {mesh.n_nodes}"]
    for row in mesh.nodes:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    lines.append(f"elems {mesh.n_elems} {mesh.elems.shape[1]}")
    for row in mesh.elems:
        lines.append(" ".join(str(v) for v in row))
    for name, idx in mesh.tags.items():
        lines.append("tag " + name + " " + " ".join(str(v) for v in idx))
    for name, idx in mesh.elem_tags.items():
        lines.append("etag " + name + " " + " ".join(str(v) for v in idx))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path):
    with open(path) as fh:
        toks = [line.split() for line in fh if line.strip()]
    if toks[0][0] != "klseep-mesh":
        raise ValueError("not a mesh file")
    pos = 2  # skip header and dim line
    n_nd = int(toks[pos][1])
    pos += 1
    nodes = np.array([[float(v) for v in toks[pos + i]] for i in range(n_nd)])
    pos += n_nd
    n_e = int(toks[pos][1])
    pos += 1
    elems = np.array([[int(v) for v in toks[pos + i]] for i in range(n_e)])
    pos += n_e
    tags, etags = {}, {}
    for t in toks[pos:]:
        if t[0] == "tag":
            tags[t[1]] = np.array([int(v) for v in t[2:]], dtype=int)
        elif t[0] == "etag":
            etags[t[1]] = np.array([int(v) for v in t[2:]], dtype=int)
    return Mesh(nodes, elems, tags=tags, elem_tags=etags)


class ObservationSet:
    """Per-case measurements sharing one selection operator H.

    H         : (m, n_x) rows over the state x = [h, q]
    y         : (T, m) measurement vectors, one row per boundary-condition case
    noise_var : (T, m) diagonal entries of each R_t, all positive
    meta      : free-form provenance (coordinates, seed, truth parameters)
    """

    def __init__(self, H, y, noise_var, meta=None):
        H = np.asarray(H, dtype=float)
        y = np.atleast_2d(np.asarray(y, dtype=float))
        noise_var = np.broadcast_to(np.asarray(noise_var, dtype=float), y.shape)
        if H.shape[0] != y.shape[1]:
            raise ValueError("H row count must match measurement length")
        if np.any(noise_var <= 0):
            raise ValueError("noise variances must be positive")
        self.H = H
        self.y = y
        self.noise_var = np.array(noise_var)
        self.meta = dict(meta or {})

    @property
    def n_cases(self):
        return self.y.shape[0]


def save_observations(obs, path):
    import json

    payload = {
        "format": "klseep-observations",
        "version": 1,
        "H": obs.H.tolist(),
        "y": obs.y.tolist(),
        "noise_var": obs.noise_var.tolist(),
        "meta": obs.meta,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_observations(path):
    import json

    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "klseep-observations":
        raise ValueError("not an observation file")
    return ObservationSet(
        np.array(payload["H"], dtype=float),
        np.array(payload["y"], dtype=float),
        np.array(payload["noise_var"], dtype=float),
        meta=payload.get("meta", {}),
    )


def write_predictions_csv(path, y_pred):
    """Flat debugging dump: case, row, value."""
    y_pred = np.atleast_2d(np.asarray(y_pred, dtype=float))
    with open(path, "w") as fh:
        fh.write("case,row,value\n")
        for t in range(y_pred.shape[0]):
            for r in range(y_pred.shape[1]):
                fh.write(f"{t},{r},{y_pred[t, r]:.17g}\n")

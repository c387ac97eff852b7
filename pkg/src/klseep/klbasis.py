"""Truncated K-L expansion of a stationary Gaussian field on a fixed bounding
domain, discretized with Gauss-Legendre quadrature.

The integral eigenvalue problem is reduced to the symmetric matrix problem
B g = lam g with B = W^(1/2) C W^(1/2); eigenfunctions are evaluated anywhere
in the bounding box through the interpolation formula

    phi_i(z) = (1/lam_i) * sum_j sqrt(w_j) g_{i,j} C(z, z_j),

so the eigenproblem is solved once and reused for every geometry update. The
module-level counter `ievp_solve_count` instruments exactly that claim.
"""

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from .errors import NotPositiveSemiDefinite, OutOfDomain, TruncationEmpty

_LN10 = np.log(10.0)

_ievp_solves = 0


def ievp_solve_count():
    """Number of integral-eigenvalue-problem solves in this process."""
    return _ievp_solves


def reset_ievp_solve_count():
    global _ievp_solves
    _ievp_solves = 0


def gauss_legendre_rule(n):
    """Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].

    Newton iteration on the Legendre recurrence, converged to 1e-15; no
    tabulated constants.
    """
    if n < 1:
        raise ValueError("quadrature order must be >= 1")
    k = np.arange(n)
    x = np.cos(np.pi * (4 * k + 3) / (4 * n + 2))
    dp = np.ones_like(x)
    for _ in range(100):
        p0 = np.ones_like(x)
        p1 = x.copy()
        for m in range(2, n + 1):
            p0, p1 = p1, ((2 * m - 1) * x * p1 - (m - 1) * p0) / m
        if n == 1:
            dp = np.ones_like(x)  # P1' = 1
        else:
            dp = n * (x * p1 - p0) / (x * x - 1.0)
        dx = p1 / dp
        x -= dx
        if np.max(np.abs(dx)) < 1e-15:
            break
    # one clean evaluation of the derivative at the converged roots
    p0 = np.ones_like(x)
    p1 = x.copy()
    for m in range(2, n + 1):
        p0, p1 = p1, ((2 * m - 1) * x * p1 - (m - 1) * p0) / m
    dp = np.ones_like(x) if n == 1 else n * (x * p1 - p0) / (x * x - 1.0)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    order = np.argsort(x)
    return x[order], w[order]


@dataclass(frozen=True)
class GaussianKernel:
    """Squared-exponential covariance C(z, z*) = v exp(-|z - z*|^2 / (2 l^2))."""

    v: float
    l: float

    def __post_init__(self):
        if not self.v > 0:
            raise ValueError("kernel scale v must be positive")
        if not self.l > 0:
            raise ValueError("correlation length l must be positive")


class BoundingDomain:
    """Axis-aligned box that strictly contains every admissible computational
    domain, so field evaluations never leave the basis support."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
            raise ValueError("lo/hi must be 1-d arrays of equal length")
        if np.any(self.hi <= self.lo):
            raise ValueError("box intervals must have positive length")

    @classmethod
    def from_intervals(cls, intervals):
        arr = np.asarray(intervals, dtype=float)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def dim(self):
        return self.lo.size

    def contains(self, points):
        pts = np.atleast_2d(points)
        tol = 1e-12 * np.max(self.hi - self.lo)
        return bool(np.all(pts >= self.lo - tol) and np.all(pts <= self.hi + tol))

    def to_json(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass
class QuadratureGrid:
    """Quadrature points/weights of the bounding-domain discretization."""

    points: np.ndarray  # (N, d)
    weights: np.ndarray  # (N,)
    dim: int
    box: BoundingDomain | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")
        if self.points.shape != (self.weights.size, self.dim):
            raise ValueError("points must have shape (N, dim)")


def gauss_legendre_grid(n_per_axis, box):
    """Tensor-product Gauss-Legendre grid mapped affinely onto the box."""
    x, w = gauss_legendre_rule(n_per_axis)
    axes = []
    axw = []
    for a, b in zip(box.lo, box.hi):
        axes.append(0.5 * (b - a) * x + 0.5 * (a + b))
        axw.append(0.5 * (b - a) * w)
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.column_stack([m.ravel() for m in mesh])
    wmesh = axw[0]
    for ww in axw[1:]:
        wmesh = np.outer(wmesh, ww).ravel()
    return QuadratureGrid(points=points, weights=wmesh, dim=box.dim, box=box)


def kernel_eval(kernel, z, zs):
    """Covariance between two coordinates."""
    d = np.asarray(z, dtype=float) - np.asarray(zs, dtype=float)
    return kernel.v * float(np.exp(-np.dot(d, d) / (2.0 * kernel.l**2)))


def kernel_matrix(kernel, A, B):
    """Cross-covariance matrix between point sets A (m, d) and B (n, d)."""
    d2 = cdist(np.atleast_2d(A), np.atleast_2d(B), "sqeuclidean")
    np.multiply(d2, -1.0 / (2.0 * kernel.l**2), out=d2)
    np.exp(d2, out=d2)
    if kernel.v != 1.0:
        d2 *= kernel.v
    return d2


def kernel_grad_z(kernel, z, zs):
    """Row vector dC/dz = -(v/l^2) (z - z*) exp(-|z - z*|^2 / (2 l^2))."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    zs = np.atleast_1d(np.asarray(zs, dtype=float))
    d = z - zs
    c = kernel.v * np.exp(-np.dot(d, d) / (2.0 * kernel.l**2))
    return -(c / kernel.l**2) * d


def retained_indices(eigvals_desc, rule):
    """Indices of eigenvalues kept by the truncation rule.

    Rules: ("abs", t) keeps lam > t; ("rel", t) keeps lam > lam_max * t;
    ("count", m) keeps the m leading (positive) eigenvalues. Eigenvalues more
    negative than -1e-10 * lam_max signal a numerically broken PSD kernel
    matrix; slightly negative ones are discarded silently.
    """
    lam = np.asarray(eigvals_desc, dtype=float)
    lam_max = lam[0] if lam.size else 0.0
    if lam_max <= 0:
        raise TruncationEmpty("spectrum has no positive eigenvalue")
    if lam.min() < -1e-10 * lam_max:
        raise NotPositiveSemiDefinite(
            f"eigenvalue {lam.min():.3e} below -1e-10 * lam_max = {-1e-10 * lam_max:.3e}"
        )
    kind, value = rule
    if kind == "abs":
        keep = np.flatnonzero(lam > value)
    elif kind == "rel":
        keep = np.flatnonzero(lam > lam_max * value)
    elif kind == "count":
        m = int(value)
        if m < 1 or m > lam.size or lam[m - 1] <= 0:
            raise TruncationEmpty(f"cannot keep {value} positive modes")
        keep = np.arange(m)
    else:
        raise ValueError(f"unknown truncation rule {kind!r}")
    if keep.size == 0:
        raise TruncationEmpty(f"no eigenvalue passes rule {rule!r}")
    return keep


@dataclass
class KLBasis:
    """Frozen eigenpairs of the bounding-domain problem plus everything needed
    to evaluate the field and its derivatives at arbitrary coordinates."""

    kernel: GaussianKernel
    grid: QuadratureGrid
    domain: BoundingDomain
    eigenvalues: np.ndarray  # (M1,), descending
    gcoef: np.ndarray  # (M1, N), orthonormal rows
    all_eigenvalues: np.ndarray  # full spectrum, for trace diagnostics
    mean: float = 0.0
    k_min: float = 0.0
    _interp: np.ndarray = field(init=False, repr=False)
    _sqrt_lam: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sw = np.sqrt(self.grid.weights)
        self._interp = (self.gcoef * sw[None, :]) / self.eigenvalues[:, None]
        self._sqrt_lam = np.sqrt(self.eigenvalues)

    @property
    def M1(self):
        return self.eigenvalues.size


def solve_ievp(kernel, grid, truncation, domain=None, mean=0.0, k_min=0.0):
    """Solve the quadrature-discretized eigenproblem and truncate.

    Eigenpairs are sorted descending; each eigenvector's largest-magnitude
    entry is made positive so repeated runs are bit-identical.
    """
    global _ievp_solves
    if domain is None:
        domain = grid.box
    if domain is None:
        raise ValueError("a bounding domain is required (grid carries none)")
    C = kernel_matrix(kernel, grid.points, grid.points)
    sw = np.sqrt(grid.weights)
    B = sw[:, None] * C * sw[None, :]
    B = 0.5 * (B + B.T)
    lam, vec = scipy.linalg.eigh(B)
    lam = lam[::-1]
    vec = vec[:, ::-1]
    keep = retained_indices(lam, truncation)
    G = vec[:, keep].T.copy()
    for g in G:
        if g[np.argmax(np.abs(g))] < 0:
            g *= -1.0
    _ievp_solves += 1
    return KLBasis(
        kernel=kernel,
        grid=grid,
        domain=domain,
        eigenvalues=lam[keep].copy(),
        gcoef=G,
        all_eigenvalues=lam.copy(),
        mean=mean,
        k_min=k_min,
    )


def _as_points(basis, z):
    """Normalize a coordinate argument to (m, d); report if it was a single point."""
    arr = np.asarray(z, dtype=float)
    d = basis.domain.dim
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
        single = True
    elif arr.ndim == 1:
        if arr.size == d:
            arr = arr.reshape(1, d)
            single = True
        elif d == 1:
            arr = arr.reshape(-1, 1)
            single = False
        else:
            raise ValueError(f"cannot interpret shape {arr.shape} as {d}-d points")
    else:
        single = False
    if not basis.domain.contains(arr):
        raise OutOfDomain(f"point(s) outside bounding box {basis.domain.lo}..{basis.domain.hi}")
    return arr, single


def eigenfunctions_at(basis, Z):
    """Interpolated eigenfunction values, shape (m, M1)."""
    Z, _ = _as_points(basis, Z)
    C = kernel_matrix(basis.kernel, Z, basis.grid.points)
    return C @ basis._interp.T


def eigenfunction_grads_at(basis, Z):
    """Spatial gradients of all eigenfunctions, shape (m, M1, d)."""
    Z, _ = _as_points(basis, Z)
    C = kernel_matrix(basis.kernel, Z, basis.grid.points)
    diff = Z[:, None, :] - basis.grid.points[None, :, :]  # (m, N, d)
    dC = diff * (C / (-basis.kernel.l**2))[:, :, None]
    return np.einsum("mjd,ij->mid", dC, basis._interp, optimize=True)


def eigenfunction(basis, i, z):
    """Value of the i-th (1-based) eigenfunction at a single coordinate."""
    if not 1 <= i <= basis.M1:
        raise IndexError(f"eigenfunction index {i} outside 1..{basis.M1}")
    return float(eigenfunctions_at(basis, z)[0, i - 1])


def eigenfunction_shape_grad(basis, i, z, dz_d2theta):
    """Chain-rule derivative of phi_i(z(2theta)) for one coordinate.

    dz_d2theta has shape (d, M2): how the evaluation point moves per geometry
    parameter.
    """
    if not 1 <= i <= basis.M1:
        raise IndexError(f"eigenfunction index {i} outside 1..{basis.M1}")
    dz = np.asarray(dz_d2theta, dtype=float)
    dphi = eigenfunction_grads_at(basis, z)[0, i - 1]  # (d,)
    return dphi @ dz


def field_eval(basis, theta1, z):
    """u(z, theta1) = mean + sum_i sqrt(lam_i) phi_i(z) theta1_i.

    theta1 may be a single coefficient vector (M1,) or a batch (M1, k); the
    result is a scalar, (m,), or (m, k) accordingly.
    """
    theta1 = np.asarray(theta1, dtype=float)
    Z, single = _as_points(basis, z)
    Phi = eigenfunctions_at(basis, Z)
    u = basis.mean + (Phi * basis._sqrt_lam[None, :]) @ theta1
    if single and theta1.ndim == 1:
        return float(u[0])
    return u


def conductivity(u, k_min):
    """Log-space transform k = k_min + 10^u (units m/s)."""
    return k_min + np.power(10.0, u)


def conductivity_grad(u, du_dtheta):
    """dk/dtheta = du/dtheta * 10^u * ln 10.

    du_dtheta may carry a trailing parameter axis ((m, P) against u of (m,)).
    """
    du = np.asarray(du_dtheta, dtype=float)
    scale = np.power(10.0, np.asarray(u, dtype=float)) * _LN10
    if du.ndim == scale.ndim + 1:
        scale = scale[..., None]
    return du * scale


def field_grads(basis, theta1, z, dz_d2theta):
    """(du/dtheta1, du/dtheta2) at a single coordinate.

    du/dtheta1_i = sqrt(lam_i) phi_i(z); du/dtheta2 advects the evaluation
    point with the geometry: sum_i sqrt(lam_i) theta1_i dphi_i/dz . dz/dtheta2.
    """
    theta1 = np.asarray(theta1, dtype=float)
    dz = np.asarray(dz_d2theta, dtype=float)
    Z, _ = _as_points(basis, z)
    Phi = eigenfunctions_at(basis, Z)
    dPhi = eigenfunction_grads_at(basis, Z)
    du1 = Phi[0] * basis._sqrt_lam
    du_dz = (basis._sqrt_lam * theta1) @ dPhi[0]  # (d,)
    return du1, du_dz @ dz


def field_and_grads(basis, theta1, Z, dZ_d2theta):
    """Fused evaluation over many points: u (m,), du/dtheta1 (m, M1),
    du/dtheta2 (m, M2). dZ_d2theta has shape (m, d, M2)."""
    theta1 = np.asarray(theta1, dtype=float)
    Z, _ = _as_points(basis, Z)
    C = kernel_matrix(basis.kernel, Z, basis.grid.points)
    Phi = C @ basis._interp.T
    du1 = Phi * basis._sqrt_lam[None, :]
    u = basis.mean + du1 @ theta1
    # spatial derivative sum_j Cc[m,j] (Z[m] - P[j]) without the (m, N, d)
    # intermediate: row-sum times Z minus a GEMM against the grid points
    coef = basis._interp.T @ (basis._sqrt_lam * theta1)  # (N,)
    Cc = C * coef[None, :]
    du_dz = (Cc.sum(axis=1)[:, None] * Z - Cc @ basis.grid.points) / (
        -basis.kernel.l**2
    )
    du2 = np.einsum("md,mdk->mk", du_dz, np.asarray(dZ_d2theta, dtype=float))
    return u, du1, du2


def save_basis(basis, path):
    """Write the basis (eigenpairs, grid, kernel) as self-describing JSON."""
    blob = {
        "format": "klseep-basis",
        "version": 1,
        "kernel": {"v": basis.kernel.v, "l": basis.kernel.l},
        "mean": basis.mean,
        "k_min": basis.k_min,
        "domain": basis.domain.to_json(),
        "grid": {
            "points": basis.grid.points.tolist(),
            "weights": basis.grid.weights.tolist(),
            "dim": basis.grid.dim,
        },
        "eigenvalues": basis.eigenvalues.tolist(),
        "all_eigenvalues": basis.all_eigenvalues.tolist(),
        "gcoef": basis.gcoef.tolist(),
    }
    with open(path, "w") as f:
        json.dump(blob, f)


def load_basis(path):
    with open(path) as f:
        blob = json.load(f)
    if blob.get("format") != "klseep-basis":
        raise ValueError(f"{path} is not a basis file")
    domain = BoundingDomain(blob["domain"]["lo"], blob["domain"]["hi"])
    grid = QuadratureGrid(
        points=np.array(blob["grid"]["points"], dtype=float),
        weights=np.array(blob["grid"]["weights"], dtype=float),
        dim=blob["grid"]["dim"],
        box=domain,
    )
    return KLBasis(
        kernel=GaussianKernel(**blob["kernel"]),
        grid=grid,
        domain=domain,
        eigenvalues=np.array(blob["eigenvalues"], dtype=float),
        gcoef=np.array(blob["gcoef"], dtype=float),
        all_eigenvalues=np.array(blob["all_eigenvalues"], dtype=float),
        mean=blob["mean"],
        k_min=blob["k_min"],
    )

"""Discrete K-L expansion over a finite point set, the reference backend.

The covariance matrix over the n_e element centers is eigendecomposed every
time the geometry moves, and the shape derivatives of the retained eigenpairs
follow the first-order perturbation formulas

    dlam_i = Phi_i' dC Phi_i,      dPhi_i = (lam_i I - C)^+  dC Phi_i,

whose pseudoinverse makes a single update O(n_e^3). That cost is the point of
keeping this backend around: the bounding-domain basis avoids it entirely.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import PinvFailure
from .klbasis import kernel_matrix, retained_indices

# gap (relative to lam_max) below which the derivative is ill-posed enough to warn
_GAP_WARN = 1e-8
# gap at or below the pseudoinverse cutoff: the zero mode cannot be separated
_GAP_FAIL = 1e-12


@dataclass
class DiscreteKLBasis:
    """Eigendecomposition of the center covariance matrix, truncated to M modes.

    The full decomposition is kept alongside the retained modes because the
    shifted pseudoinverses in the shape derivative reuse it.
    """

    cov: np.ndarray  # (n, n)
    eigenvalues: np.ndarray  # (M,), descending
    eigvecs: np.ndarray  # (n, M), orthonormal columns
    all_eigenvalues: np.ndarray  # (n,), descending
    all_eigvecs: np.ndarray  # (n, n)
    mean: float = 0.0

    @property
    def n(self):
        return self.cov.shape[0]

    @property
    def M(self):
        return self.eigenvalues.size


def build_cov_matrix(kernel, centers):
    """Covariance matrix C with c_ij = C(z_i, z_j) over the centers (n, d)."""
    C = kernel_matrix(kernel, centers, centers)
    # enforce exact symmetry and unit-lag diagonal against rounding
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, kernel.v)
    return C


def cov_matrix_shape_grad(kernel, centers, dcenters):
    """Per-parameter derivative matrices of the center covariance.

    Both arguments of C move with the geometry: with difference d_ij = z_i - z_j,

        dC_ij/dt = -(C_ij / l^2) d_ij . (dz_i/dt - dz_j/dt).

    centers: (n, d); dcenters: (n, d, M2). Returns (M2, n, n).
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    dcenters = np.asarray(dcenters, dtype=float)
    C = kernel_matrix(kernel, centers, centers)
    diff = centers[:, None, :] - centers[None, :, :]  # (n, n, d)
    dd = dcenters[:, None, :, :] - dcenters[None, :, :, :]  # (n, n, d, M2)
    out = np.einsum("ijd,ijdm->mij", diff, dd, optimize=True)
    out *= (C / (-kernel.l**2))[None, :, :]
    return out


def discrete_kl_eigen(C, truncation, mean=0.0):
    """Eigendecompose C (descending, sign-fixed) and truncate by rule."""
    C = np.asarray(C, dtype=float)
    lam, vec = scipy.linalg.eigh(C)
    lam = lam[::-1].copy()
    vec = vec[:, ::-1].copy()
    for j in range(vec.shape[1]):
        col = vec[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            vec[:, j] = -col
    keep = retained_indices(lam, truncation)
    return DiscreteKLBasis(
        cov=C,
        eigenvalues=lam[keep].copy(),
        eigvecs=vec[:, keep].copy(),
        all_eigenvalues=lam,
        all_eigvecs=vec,
        mean=mean,
    )


def discrete_field_eval(basis, theta1):
    """X = mean + sum_i sqrt(lam_i) Phi_i theta_i, one value per center."""
    theta1 = np.asarray(theta1, dtype=float)
    return basis.mean + (basis.eigvecs * np.sqrt(basis.eigenvalues)[None, :]) @ theta1


def discrete_field_coef_grad(basis):
    """dX/dtheta1 as an (n, M) matrix: column i is sqrt(lam_i) Phi_i."""
    return basis.eigvecs * np.sqrt(basis.eigenvalues)[None, :]


def moore_penrose_pinv(A, tol=1e-12):
    """Pseudoinverse of a symmetric matrix via full eigendecomposition.

    Eigenvalues of magnitude at or below tol * max|eig| are treated as zero.
    """
    A = np.asarray(A, dtype=float)
    lam, U = scipy.linalg.eigh(A)
    scale = np.max(np.abs(lam)) if lam.size else 0.0
    inv = np.zeros_like(lam)
    live = np.abs(lam) > tol * scale
    inv[live] = 1.0 / lam[live]
    return (U * inv[None, :]) @ U.T


def discrete_field_shape_grad(basis, theta1, dC_d2theta, tol=1e-12):
    """dX/d2theta, shape (n, M2), from per-parameter covariance derivatives.

    The shifted pseudoinverses (lam_i I - C)^+ share the full eigendecomposition
    of C: shifting only moves the spectrum, not the eigenvectors. Modes within
    tol * lam_max of lam_i are zeroed, exactly as the standalone pseudoinverse
    would; an isolated zero gap besides mode i itself means the derivative is
    not defined and raises.
    """
    theta1 = np.asarray(theta1, dtype=float)
    dC = np.asarray(dC_d2theta, dtype=float)
    n, M = basis.n, basis.M
    n_par = dC.shape[0]
    lam_all = basis.all_eigenvalues
    U = basis.all_eigvecs
    lam_max = lam_all[0]

    out = np.zeros((n, n_par))
    # dC[m] Phi_i for every retained mode and parameter in one product
    dCPhi = np.einsum("mij,jk->mik", dC, basis.eigvecs, optimize=True)  # (n_par, n, M)
    UT_dCPhi = np.einsum("ji,mjk->mik", U, dCPhi, optimize=True)  # (n_par, n, M)

    sqrt_lam = np.sqrt(basis.eigenvalues)
    for i in range(M):
        lam_i = basis.eigenvalues[i]
        shifted = lam_i - lam_all
        dead = np.abs(shifted) <= tol * lam_max
        gap = np.min(np.abs(shifted[~dead])) if np.any(~dead) else 0.0
        if dead.sum() > 1 or gap == 0.0:
            raise PinvFailure(
                f"mode {i + 1}: {int(dead.sum())} eigenvalues within "
                f"{tol:g}*lam_max of lam_i, nearest live gap {gap:.3e}"
            )
        if gap < _GAP_WARN * lam_max:
            warnings.warn(
                f"mode {i + 1}: eigenvalue gap {gap:.3e} below "
                f"{_GAP_WARN:g}*lam_max; shape derivative is ill-conditioned",
                stacklevel=2,
            )
        inv = np.zeros(n)
        inv[~dead] = 1.0 / shifted[~dead]
        for m in range(n_par):
            dlam = basis.eigvecs[:, i] @ dCPhi[m, :, i]
            dphi = U @ (inv * UT_dCPhi[m, :, i])
            out[:, m] += theta1[i] * (dlam / (2 * sqrt_lam[i]) * basis.eigvecs[:, i]
                                      + sqrt_lam[i] * dphi)
    return out

"""Convergence and posterior-summary statistics.

Multivariate effective sample size via batch means, the minimum-ESS stopping
threshold, highest-posterior-density summaries (1D shortest interval; in
higher dimensions membership by potential ranking, since phi is available
exactly), pixel rasters of cavity-interface zones, and per-point field
percentiles with cavity masking.
"""

import warnings

import numpy as np
from scipy.special import gammaln
from scipy.stats import chi2

from .errors import InsufficientSamples


def multivariate_ess(samples):
    """Batch-means multivariate ESS: n (|Lambda| / |Sigma_bm|)^(1/M).

    Lambda is the sample covariance, Sigma_bm the batch-means estimate of the
    long-run covariance with batch size floor(sqrt(n)).  Raises
    InsufficientSamples when there are fewer than M + 1 batches or either
    covariance is numerically singular (the determinant ratio would be
    meaningless).
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, M = x.shape
    b = int(np.sqrt(n))
    a = n // b
    if a < M + 1:
        raise InsufficientSamples(
            f"{a} batches for dimension {M}; need at least M + 1"
        )
    x = x[: a * b]
    lam = np.cov(x.T, ddof=1).reshape(M, M)
    means = x.reshape(a, b, M).mean(axis=1)
    sig = b * np.cov(means.T, ddof=1).reshape(M, M)
    s_lam, ld_lam = np.linalg.slogdet(lam)
    s_sig, ld_sig = np.linalg.slogdet(sig)
    if s_lam <= 0 or s_sig <= 0:
        raise InsufficientSamples("singular sample or batch-means covariance")
    return float(a * b * np.exp((ld_lam - ld_sig) / M))


def min_ess(M, alpha=0.05, eps=0.05):
    """Minimum effective sample size for an M-dimensional estimand:

        2^(2/M) pi / (M Gamma(M/2))^(2/M) * chi2_{1-alpha,M} / eps^2

    where eps is the target relative precision of the mean estimate and
    1 - alpha the confidence level.
    """
    M = int(M)
    log_pref = (2.0 / M) * np.log(2.0) + np.log(np.pi) - (2.0 / M) * (
        np.log(M) + gammaln(M / 2.0)
    )
    return float(np.exp(log_pref) * chi2.ppf(1.0 - alpha, M) / eps**2)


def hpd_interval(samples, level):
    """Shortest interval containing `level` of the samples."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    m = min(n, max(1, int(np.ceil(level * n))))
    widths = x[m - 1 :] - x[: n - m + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + m - 1])


def hpd_mask(phi, level):
    """True for the lowest-potential fraction `level` of the samples."""
    phi = np.asarray(phi, dtype=float).ravel()
    n = phi.size
    k = min(n, max(1, int(np.ceil(level * n))))
    order = np.argsort(phi, kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:k]] = True
    return mask


class RasterGrid:
    """Square pixel grid over [-w, w]^2; centers ordered x-fastest."""

    def __init__(self, n, half_width=4.0):
        self.n = int(n)
        self.half_width = float(half_width)
        self.pitch = 2.0 * self.half_width / self.n
        ax = -self.half_width + (np.arange(self.n) + 0.5) * self.pitch
        X, Y = np.meshgrid(ax, ax)
        self.centers = np.column_stack([X.ravel(), Y.ravel()])

    @property
    def half_diag(self):
        return 0.5 * np.sqrt(2.0) * self.pitch

    def as_image(self, values):
        """Flat per-pixel values to an (n, n) array, row 0 at lowest y."""
        return np.asarray(values).reshape(self.n, self.n)


def raster_grid(n=160, half_width=4.0):
    return RasterGrid(n, half_width)


def circle_band(theta2, grid):
    """Pixels whose center lies within half a pixel diagonal of the circle."""
    c = np.asarray(theta2, dtype=float)
    d = np.linalg.norm(grid.centers - c[:2], axis=1)
    return np.abs(d - c[2]) < grid.half_diag


def interface_zones(circles, phi, levels=(5, 50, 95), grid=None):
    """S_alpha rasters: pixels touched by any circle in the alpha%-HPD set.

    circles holds one (center_x, center_y, radius) row per sample and phi the
    matching potential values used for HPD ranking.  Returns a dict mapping
    each level to a flat boolean mask on the grid; nesting S_5 within S_50
    within S_95 is automatic because the HPD sample sets nest.
    """
    circles = np.atleast_2d(np.asarray(circles, dtype=float))
    if grid is None:
        grid = raster_grid(160)
    out = {}
    for level in sorted(levels):
        sel = circles[hpd_mask(phi, level / 100.0)]
        zone = np.zeros(grid.centers.shape[0], dtype=bool)
        for chunk in np.array_split(sel, max(1, sel.shape[0] // 256)):
            diff = grid.centers[None, :, :] - chunk[:, None, :2]
            d = np.linalg.norm(diff, axis=2)
            zone |= np.any(
                np.abs(d - chunk[:, None, 2]) < grid.half_diag, axis=0
            )
        out[level] = zone
    return out


def field_percentiles(values, mask=None, percentiles=(2.5, 50.0, 97.5)):
    """Per-point percentiles over samples; masked entries are excluded.

    values has one row per sample and one column per evaluation point; mask
    (same shape) marks entries where that sample's field is undefined (e.g.
    inside its cavity).  Points excluded by every sample come back NaN.
    """
    vals = np.array(values, dtype=float)
    if mask is not None:
        vals[np.asarray(mask, dtype=bool)] = np.nan
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanpercentile(vals, list(percentiles), axis=0)

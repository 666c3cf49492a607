"""Shared numerical kernels.

Everything downstream (encoding operators, the N4-style field estimator,
the patch prior) is built on the routines here: unitary 2D FFTs, separable
Gaussian low-pass filtering, weighted tensor-product cubic B-spline field
fitting, soft (linearly shared) histograms, and deterministic seed
derivation. All functions are pure and operate on plain numpy arrays;
2D float64 arrays play the role of real images and 2D complex128 arrays
the role of complex images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "derive_seed",
    "fft2_unitary",
    "ifft2_unitary",
    "lowpass_gaussian",
    "Histogram",
    "histogram",
    "BSplineFitter",
    "bspline_smooth",
]


def derive_seed(*keys: int) -> int:
    """Derive a child seed from an integer key path.

    Stable across platforms and numpy versions (SeedSequence hashing), so
    nested components (per-iteration prior steps, per-sample noise, ...)
    can draw independent deterministic streams from one top-level seed.
    """
    if not keys:
        raise ValueError("derive_seed needs at least one key")
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _check_image(img: np.ndarray, name: str = "img") -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a 2D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr.view(np.float64) if arr.dtype.kind == "c" else arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def fft2_unitary(img: np.ndarray) -> np.ndarray:
    """Unitary forward 2D DFT (norm-preserving, arbitrary sizes)."""
    arr = _check_image(np.asarray(img, dtype=np.complex128))
    return np.fft.fft2(arr, norm="ortho")


def ifft2_unitary(img: np.ndarray) -> np.ndarray:
    """Unitary inverse 2D DFT; exact adjoint and inverse of fft2_unitary."""
    arr = _check_image(np.asarray(img, dtype=np.complex128))
    return np.fft.ifft2(arr, norm="ortho")


def _reflect_indices(idx: np.ndarray, n: int) -> np.ndarray:
    """Map out-of-range indices back into [0, n) by mirror reflection
    about the edge samples (0 and n-1 are not repeated)."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    j = np.mod(idx, period)
    return np.where(j >= n, period - j, j)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(4.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _filter_axis0(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    n = arr.shape[0]
    radius = (len(kernel) - 1) // 2
    idx = _reflect_indices(np.arange(-radius, n + radius), n)
    padded = arr[idx]
    out = np.zeros_like(arr)
    for k in range(len(kernel)):
        out += kernel[k] * padded[k : k + n]
    return out


def lowpass_gaussian(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflective boundary handling.

    The kernel is truncated at 4*sigma and renormalised, so constants are
    preserved exactly. sigma = 0 returns the input unchanged.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    arr = _check_image(np.asarray(img, dtype=np.float64))
    if sigma == 0:
        return arr.copy()
    kernel = _gaussian_kernel(sigma)
    out = _filter_axis0(arr, kernel)
    out = _filter_axis0(out.T, kernel).T
    return out


# ---------------------------------------------------------------------------
# soft histogram
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Histogram:
    """Soft histogram: counts are real because sample mass is shared
    linearly between the two nearest bin centers."""

    bin_edges: np.ndarray  # (n_bins + 1,) monotone
    counts: np.ndarray  # (n_bins,) nonnegative

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])


def histogram(values: np.ndarray, n_bins: int, value_range: tuple[float, float]) -> Histogram:
    """Linear-binning histogram with triangular mass sharing.

    Each in-range value distributes unit mass between the two adjacent bin
    centers in proportion to proximity; values beyond the outermost centers
    deposit their full mass in the edge bin. Total mass equals the number
    of values inside [lo, hi].
    """
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size == 0:
        raise ValueError("histogram of empty input")
    lo, hi = float(value_range[0]), float(value_range[1])
    if not lo < hi:
        raise ValueError(f"need lo < hi, got ({lo}, {hi})")
    if n_bins < 2:
        raise ValueError(f"need n_bins >= 2, got {n_bins}")
    if not np.all(np.isfinite(vals)):
        raise ValueError("histogram input contains non-finite values")

    edges = np.linspace(lo, hi, n_bins + 1)
    width = (hi - lo) / n_bins
    v = vals[(vals >= lo) & (vals <= hi)]
    counts = np.zeros(n_bins, dtype=np.float64)
    if v.size:
        t = (v - lo) / width - 0.5  # position in units of bins, relative to center 0
        k = np.floor(t)
        frac = t - k
        k = k.astype(np.int64)
        np.add.at(counts, np.clip(k, 0, n_bins - 1), 1.0 - frac)
        np.add.at(counts, np.clip(k + 1, 0, n_bins - 1), frac)
    return Histogram(bin_edges=edges, counts=counts)


# ---------------------------------------------------------------------------
# cubic B-spline field approximation
# ---------------------------------------------------------------------------


def _bspline_basis(n_points: int, spacing: float) -> np.ndarray:
    """Design matrix of a uniform cubic B-spline along one axis.

    Knots sit at multiples of `spacing` (in pixel units); the control array
    carries nseg + 3 coefficients for nseg spans covering [0, n_points - 1].
    """
    nseg = max(1, int(math.ceil((n_points - 1) / spacing))) if n_points > 1 else 1
    t = np.arange(n_points, dtype=np.float64) / spacing
    span = np.minimum(np.floor(t).astype(np.int64), nseg - 1)
    u = t - span
    basis = np.zeros((n_points, nseg + 3), dtype=np.float64)
    rows = np.arange(n_points)
    u2, u3 = u * u, u * u * u
    blend = (
        (1.0 - u) ** 3 / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    )
    for m, b in enumerate(blend):
        basis[rows, span + m] = b
    return basis


class BSplineFitter:
    """Weighted least-squares tensor-product cubic B-spline approximation.

    Precomputes a factorization of the weighted normal equations for a
    fixed image shape, control spacing and weight map; `fit` then costs a
    few small matrix products per field. The solve runs in the basis of
    generalized eigenvectors of (weighted Gram, unweighted Gram), whose
    eigenvalues measure how much of each control direction the weights
    actually cover. Directions covered below `coverage_cutoff` (relative
    to the best-covered one) are dropped, which keeps extrapolation beyond
    the weighted region tame instead of letting weakly determined corner
    coefficients blow it up. With uniform weights every direction is
    equally covered, nothing is dropped, and fields already in the spline
    space are reproduced to machine precision.
    """

    def __init__(
        self,
        shape: tuple[int, int],
        control_spacing: float,
        weights: np.ndarray,
        coverage_cutoff: float = 1e-3,
    ):
        if control_spacing < 2:
            raise ValueError(f"control_spacing must be >= 2, got {control_spacing}")
        h, w = int(shape[0]), int(shape[1])
        wts = np.asarray(weights, dtype=np.float64)
        if wts.shape != (h, w):
            raise ValueError(f"weights shape {wts.shape} != image shape {(h, w)}")
        if np.any(wts < 0):
            raise ValueError("weights must be nonnegative")
        if not np.any(wts > 0):
            raise ValueError("weights are all zero")

        self.shape = (h, w)
        self.weights = wts
        self.basis_y = _bspline_basis(h, control_spacing)
        self.basis_x = _bspline_basis(w, control_spacing)
        ny, nx = self.basis_y.shape[1], self.basis_x.shape[1]
        if ny > h or nx > w:
            raise ValueError(
                f"control grid {ny}x{nx} finer than the {h}x{w} pixel grid"
            )
        self._nctrl = (ny, nx)

        t = np.einsum("yx,xj,xl->yjl", wts, self.basis_x, self.basis_x)
        normal = np.einsum("yi,yk,yjl->ijkl", self.basis_y, self.basis_y, t)
        normal = normal.reshape(ny * nx, ny * nx)
        gram = np.kron(self.basis_y.T @ self.basis_y, self.basis_x.T @ self.basis_x)
        chol = np.linalg.cholesky(gram)
        m = np.linalg.solve(chol, np.linalg.solve(chol, normal).T).T
        lam, q = np.linalg.eigh(0.5 * (m + m.T))
        keep = lam > coverage_cutoff * lam[-1]
        self._chol = chol
        self._q = q
        self._inv_lam = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)

    def fit(self, field: np.ndarray) -> np.ndarray:
        """Return the smooth spline approximation of `field` on the full grid."""
        arr = np.asarray(field, dtype=np.float64)
        if arr.shape != self.shape:
            raise ValueError(f"field shape {arr.shape} != fitter shape {self.shape}")
        ny, nx = self._nctrl
        rhs = self.basis_y.T @ (self.weights * arr) @ self.basis_x
        z = np.linalg.solve(self._chol, rhs.ravel())
        d = self._q @ (self._inv_lam * (self._q.T @ z))
        coef = np.linalg.solve(self._chol.T, d)
        return self.basis_y @ coef.reshape(ny, nx) @ self.basis_x.T


def bspline_smooth(field: np.ndarray, weights: np.ndarray, control_spacing: float) -> np.ndarray:
    """Weighted cubic B-spline approximation of a scalar field.

    Exact (to regularisation level) on fields already in the spline space,
    in particular on polynomials up to degree 3 per axis when the control
    grid resolves them. Zero-weight pixels are ignored by the fit but still
    receive extrapolated values.
    """
    arr = _check_image(np.asarray(field, dtype=np.float64), "field")
    return BSplineFitter(arr.shape, control_spacing, weights).fit(arr)

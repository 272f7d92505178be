"""Background subtraction, resolution adjustment, histogram matching, and
the classical fallback probability map.

Rolling-ball background subtraction is a morphological opening with a flat
ellipsoidal structuring element whose semi-axes are radius/spacing voxels
per axis, so the physical ball shape is preserved under anisotropic
spacing.  The opening is computed exactly by decomposing the ellipsoid
into per-row sliding-window minima (van Herk), stacked over the ellipse
cross-sections.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit, prange
from scipy.ndimage import gaussian_filter, map_coordinates

from .volume import DataError, ScalarVolume

HIST_BINS = 256


@dataclass
class PreprocessParams:
    ball_radius: float = 5.0  # um
    target_spacing: tuple[float, float, float] | None = None
    reference_cdf: np.ndarray | None = None

    def __post_init__(self):
        if self.ball_radius <= 0:
            raise DataError("ball_radius must be positive")
        if self.target_spacing is not None:
            if any(s <= 0 for s in self.target_spacing):
                raise DataError("target_spacing must be positive")
        if self.reference_cdf is not None:
            validate_reference_cdf(self.reference_cdf)


def validate_reference_cdf(cdf):
    cdf = np.asarray(cdf, dtype=np.float64)
    if cdf.shape != (HIST_BINS,):
        raise DataError(f"reference CDF must have {HIST_BINS} bins")
    if np.any(np.diff(cdf) < 0):
        raise DataError("reference CDF must be non-decreasing")
    if cdf[0] < 0 or abs(cdf[-1] - 1.0) > 1e-9:
        raise DataError("reference CDF must end at 1.0")
    return cdf


# ---------------------------------------------------------------------------
# flat ellipsoid erosion / dilation
# ---------------------------------------------------------------------------

def _axis_extent(limit2, s):
    """Largest integer w with (w*s)^2 <= limit2, matching the SE inequality."""
    if limit2 < 0:
        return -1
    w = int(math.sqrt(limit2) / s)
    while ((w + 1) * s) ** 2 <= limit2:
        w += 1
    while w > 0 and (w * s) ** 2 > limit2:
        w -= 1
    return w


def ellipsoid_profiles(radius, spacing):
    """Half-width table of the discretized ellipsoid SE.

    Returns (hw, ry_arr, rz): hw[adz, ady] is the x half-width of the SE
    cross-section at z-offset adz, row-offset ady; -1 marks absent rows.
    """
    sz, sy, sx = spacing
    r2 = float(radius) ** 2
    rz = _axis_extent(r2, sz)
    ry_max = _axis_extent(r2, sy)
    hw = np.full((rz + 1, ry_max + 1), -1, dtype=np.int64)
    ry_arr = np.empty(rz + 1, dtype=np.int64)
    for adz in range(rz + 1):
        rem2 = r2 - (adz * sz) ** 2
        ry_z = _axis_extent(rem2, sy)
        ry_arr[adz] = ry_z
        for ady in range(ry_z + 1):
            hw[adz, ady] = _axis_extent(rem2 - (ady * sy) ** 2, sx)
    return hw, ry_arr, rz


@njit(cache=True)
def _erode_row(row, w, out, p, fwd, bwd):
    n = row.size
    if w == 0:
        for i in range(n):
            out[i] = row[i]
        return
    k = 2 * w + 1
    m = n + 2 * w
    blocks = (m + k - 1) // k
    M = blocks * k
    for i in range(M):
        p[i] = np.inf
    for i in range(n):
        p[w + i] = row[i]
    for i in range(M):
        if i % k == 0:
            fwd[i] = p[i]
        else:
            fwd[i] = min(fwd[i - 1], p[i])
    for i in range(M - 1, -1, -1):
        if i == M - 1 or (i + 1) % k == 0:
            bwd[i] = p[i]
        else:
            bwd[i] = min(bwd[i + 1], p[i])
    for i in range(n):
        out[i] = min(bwd[i], fwd[i + 2 * w])


@njit(cache=True)
def _erode2d(sl, hws, ry, out, scratch, p, fwd, bwd):
    """Erosion of one slice by the ellipse with half-width profile hws."""
    Y, X = sl.shape
    for dyi in range(ry + 1):
        w = hws[dyi]
        if dyi > 0 and w == hws[dyi - 1]:
            for y in range(Y):
                for x in range(X):
                    scratch[dyi, y, x] = scratch[dyi - 1, y, x]
        else:
            for y in range(Y):
                _erode_row(sl[y], w, scratch[dyi, y], p, fwd, bwd)
    for y in range(Y):
        for x in range(X):
            out[y, x] = scratch[0, y, x]
    for dy in range(1, ry + 1):
        for y in range(Y):
            up = y - dy
            dn = y + dy
            if up >= 0:
                for x in range(X):
                    if scratch[dy, up, x] < out[y, x]:
                        out[y, x] = scratch[dy, up, x]
            if dn < Y:
                for x in range(X):
                    if scratch[dy, dn, x] < out[y, x]:
                        out[y, x] = scratch[dy, dn, x]


@njit(cache=True, parallel=True)
def _ellipsoid_erode(vol, hw, ry_arr, rz):
    Z, Y, X = vol.shape
    ry_max = hw.shape[1] - 1
    wmax = 0
    for i in range(hw.shape[0]):
        for j in range(hw.shape[1]):
            if hw[i, j] > wmax:
                wmax = hw[i, j]
    buf = X + 4 * wmax + 4
    E = np.empty((rz + 1, Z, Y, X), vol.dtype)
    for t in prange((rz + 1) * Z):
        ci = t // Z
        z = t % Z
        scratch = np.empty((ry_max + 1, Y, X), vol.dtype)
        p = np.empty(buf, vol.dtype)
        fwd = np.empty(buf, vol.dtype)
        bwd = np.empty(buf, vol.dtype)
        _erode2d(vol[z], hw[ci], ry_arr[ci], E[ci, z], scratch, p, fwd, bwd)
    out = np.empty_like(vol)
    for z in prange(Z):
        for y in range(Y):
            for x in range(X):
                out[z, y, x] = E[0, z, y, x]
        for dz in range(1, rz + 1):
            zu = z - dz
            zd = z + dz
            if zu >= 0:
                for y in range(Y):
                    for x in range(X):
                        if E[dz, zu, y, x] < out[z, y, x]:
                            out[z, y, x] = E[dz, zu, y, x]
            if zd < Z:
                for y in range(Y):
                    for x in range(X):
                        if E[dz, zd, y, x] < out[z, y, x]:
                            out[z, y, x] = E[dz, zd, y, x]
    return out


def ellipsoid_erode(data: np.ndarray, radius, spacing) -> np.ndarray:
    """Flat grayscale erosion by the physical-radius ellipsoid (exact)."""
    hw, ry_arr, rz = ellipsoid_profiles(radius, spacing)
    return _ellipsoid_erode(np.ascontiguousarray(data, dtype=np.float32), hw, ry_arr, rz)


def ellipsoid_dilate(data: np.ndarray, radius, spacing) -> np.ndarray:
    return -ellipsoid_erode(-np.asarray(data, dtype=np.float32), radius, spacing)


def rolling_ball_subtract(v: ScalarVolume, radius: float) -> ScalarVolume:
    """Subtract the morphological-opening background estimate.

    Output is clamp(v - opening(v, ball SE), 0, 1).  A radius below one
    voxel along every axis degenerates to a single-voxel SE, whose opening
    is the identity; the all-zero result is correct but worth a warning.
    """
    if radius <= 0:
        raise DataError("rolling-ball radius must be positive")
    data = v.as_float().data.astype(np.float32)
    hw, ry_arr, rz = ellipsoid_profiles(radius, v.spacing)
    if rz == 0 and ry_arr[0] == 0 and hw[0, 0] == 0:
        warnings.warn(
            f"rolling-ball radius {radius} um is below one voxel on every axis; "
            f"opening is the identity and the output is all zeros"
        )
    eroded = _ellipsoid_erode(data, hw, ry_arr, rz)
    opened = -_ellipsoid_erode(-eroded, hw, ry_arr, rz)
    out = np.clip(data - opened, 0.0, 1.0)
    return ScalarVolume(v.dims, v.spacing, out)


# ---------------------------------------------------------------------------
# resampling and histogram matching
# ---------------------------------------------------------------------------

def resample(v: ScalarVolume, target_spacing) -> ScalarVolume:
    """Trilinear resampling onto a grid with the given spacing (um)."""
    if any(s <= 0 for s in target_spacing):
        raise DataError("target spacing must be positive")
    if tuple(target_spacing) == v.spacing:
        return ScalarVolume(v.dims, v.spacing, v.data.copy())
    new_dims = tuple(
        int(round(d * so / sn)) for d, so, sn in zip(v.dims, v.spacing, target_spacing)
    )
    if any(d == 0 for d in new_dims):
        raise DataError(f"resampling to spacing {target_spacing} collapses dims to {new_dims}")
    axes = [
        np.clip(np.arange(nd) * (sn / so), 0, d - 1)
        for nd, sn, so, d in zip(new_dims, target_spacing, v.spacing, v.dims)
    ]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    out = map_coordinates(v.as_float().data, [zz, yy, xx], order=1, mode="nearest")
    return ScalarVolume(new_dims, tuple(float(s) for s in target_spacing), out)


def volume_cdf(v: ScalarVolume) -> np.ndarray:
    """256-bin cumulative distribution of a [0, 1] volume."""
    data = v.as_float().data
    levels = np.minimum((data.astype(np.float64) * HIST_BINS).astype(np.int64), HIST_BINS - 1)
    counts = np.bincount(levels.ravel(), minlength=HIST_BINS)
    return np.cumsum(counts) / data.size


def histogram_match(v: ScalarVolume, reference_cdf) -> ScalarVolume:
    """Monotone remap so the output CDF matches reference_cdf at 256 levels.

    Output intensities are bin centers (m + 0.5)/256.  Constant input has
    no histogram to move; it is returned unchanged with a warning.
    """
    ref = validate_reference_cdf(reference_cdf)
    data = v.as_float().data
    if float(data.min()) == float(data.max()):
        warnings.warn("histogram_match: constant input, identity mapping")
        return ScalarVolume(v.dims, v.spacing, data.copy())
    levels = np.minimum((data.astype(np.float64) * HIST_BINS).astype(np.int64), HIST_BINS - 1)
    counts = np.bincount(levels.ravel(), minlength=HIST_BINS)
    cdf_in = np.cumsum(counts) / data.size
    mapping = np.minimum(np.searchsorted(ref, cdf_in, side="left"), HIST_BINS - 1)
    out = ((mapping[levels] + 0.5) / HIST_BINS).astype(np.float32)
    return ScalarVolume(v.dims, v.spacing, out)


def write_reference_cdf(cdf, path):
    """Sidecar format: 256 little-endian float64 values."""
    np.asarray(cdf, dtype="<f8").tofile(path)


def read_reference_cdf(path) -> np.ndarray:
    cdf = np.fromfile(path, dtype="<f8")
    return validate_reference_cdf(cdf)


# ---------------------------------------------------------------------------
# classical fallback probability map
# ---------------------------------------------------------------------------

def fallback_probmap(v: ScalarVolume, smooth_sigma: float) -> ScalarVolume:
    """Gaussian-smoothed, min-max-normalized membrane probability.

    Stands in for a learned probability map: membranes are the bright
    structures, so smoothing plus normalization yields a usable q.
    sigma is physical (um); sigma = 0 skips smoothing.
    """
    data = v.as_float().data
    if data.min() < 0 or data.max() > 1:
        raise DataError("fallback_probmap expects intensities in [0, 1]")
    if smooth_sigma < 0:
        raise DataError("smooth_sigma must be >= 0")
    g = data.astype(np.float64)
    if smooth_sigma > 0:
        g = gaussian_filter(g, sigma=[smooth_sigma / s for s in v.spacing], mode="nearest")
    lo = g.min()
    span = g.max() - lo
    if span == 0:
        warnings.warn("fallback_probmap: constant volume, degenerate all-zero map")
        out = np.zeros_like(g, dtype=np.float32)
    else:
        out = ((g - lo) / span).astype(np.float32)
    return ScalarVolume(v.dims, v.spacing, out)


def preprocess_volume(v: ScalarVolume, params: PreprocessParams) -> ScalarVolume:
    """Background subtraction, then optional resampling and histogram match."""
    out = rolling_ball_subtract(v, params.ball_radius)
    if params.target_spacing is not None:
        out = resample(out, params.target_spacing)
    if params.reference_cdf is not None:
        out = histogram_match(out, params.reference_cdf)
    return out

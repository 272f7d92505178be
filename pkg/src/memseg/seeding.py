"""Automatic seed generation from a membrane probability map.

Chain: Otsu threshold -> anisotropic Euclidean distance transform of the
membrane mask -> H-maxima suppression (reconstruction by dilation) ->
26-connected regional maxima become seed regions.

Conventions: membrane mask is q >= threshold, cell interior is q < threshold.
Maxima and components use 26-connectivity; distances are physical (um).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .volume import DataError, LabelVolume, ScalarVolume


@dataclass
class SeedSet:
    """Labeled seed regions plus the parameters that produced them."""

    seeds: list[tuple[np.ndarray, int]]  # ((M, 3) int32 zyx coords, label)
    h_value: float
    threshold: float | None = None

    @property
    def num_seeds(self) -> int:
        return len(self.seeds)

    def to_label_volume(self, dims, spacing) -> LabelVolume:
        lab = np.zeros(dims, dtype=np.uint32)
        for coords, label in self.seeds:
            lab[coords[:, 0], coords[:, 1], coords[:, 2]] = label
        return LabelVolume(dims, spacing, lab, num_labels=len(self.seeds))

    @staticmethod
    def from_label_volume(lv: LabelVolume, h_value=float("nan"), threshold=None) -> "SeedSet":
        seeds = []
        for label in lv.label_set():
            coords = np.argwhere(lv.data == label).astype(np.int32)
            seeds.append((coords, int(label)))
        return SeedSet(seeds, h_value, threshold)


def otsu_threshold(q) -> float:
    """256-bin Otsu threshold over [0, 1], maximizing between-class variance.

    Returns the lower edge of the first above-threshold bin; ties broken
    toward the lower threshold.
    """
    data = q.data if isinstance(q, ScalarVolume) else np.asarray(q)
    vals = data.astype(np.float64).ravel()
    if vals.min() < 0.0 or vals.max() > 1.0:
        raise DataError("otsu_threshold expects values in [0, 1]")
    levels = np.minimum((vals * 256).astype(np.int64), 255)
    counts = np.bincount(levels, minlength=256).astype(np.float64)
    if np.count_nonzero(counts) < 2:
        raise DataError("otsu_threshold: input is constant at 256-level quantization")
    n = counts.sum()
    p = counts / n
    omega = np.cumsum(p)  # class-0 mass for split after bin k
    mu = np.cumsum(p * np.arange(256))
    mu_t = mu[-1]
    k = np.arange(255)
    w0 = omega[k]
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    sigma_b = np.zeros(255)
    sigma_b[valid] = (mu_t * w0[valid] - mu[k][valid]) ** 2 / (w0[valid] * w1[valid])
    best = int(np.argmax(sigma_b))  # argmax returns the first (lowest) maximizer
    return (best + 1) / 256.0


# ---------------------------------------------------------------------------
# exact Euclidean distance transform, separable lower-envelope method
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def _edt_axis_pass(f2, s):
    """One 1D squared-distance pass over all lines (rows of f2), spacing s."""
    nlines, n = f2.shape
    out = np.empty_like(f2)
    s2 = s * s
    for li in prange(nlines):
        f = f2[li]
        v = np.empty(n, np.int64)
        z = np.empty(n + 1, np.float64)
        k = -1
        for q in range(n):
            fq = f[q]
            if fq == np.inf:
                continue
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
                continue
            while True:
                vk = v[k]
                sx = ((fq + s2 * q * q) - (f[vk] + s2 * vk * vk)) / (2.0 * s2 * (q - vk))
                if sx <= z[k]:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            z[k] = sx
            z[k + 1] = np.inf
        if k < 0:
            for i in range(n):
                out[li, i] = np.inf
        else:
            j = 0
            for i in range(n):
                while z[j + 1] < i:
                    j += 1
                d = i - v[j]
                out[li, i] = s2 * d * d + f[v[j]]
    return out


def distance_transform(mask: np.ndarray, spacing) -> ScalarVolume:
    """Exact anisotropic EDT: physical distance to the nearest True voxel.

    Squared distances are minimized axis by axis with the lower-envelope
    parabola method, O(N) per axis.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise DataError("distance_transform expects a 3D mask")
    n_mem = int(mask.sum())
    if n_mem == 0:
        raise DataError("distance_transform: mask has no membrane voxels")
    if n_mem == mask.size:
        raise DataError("distance_transform: mask is all membrane")
    f = np.where(mask, 0.0, np.inf)
    for axis in range(3):
        moved = np.ascontiguousarray(np.moveaxis(f, axis, -1))
        shape = moved.shape
        res = _edt_axis_pass(moved.reshape(-1, shape[-1]), float(spacing[axis]))
        f = np.moveaxis(res.reshape(shape), -1, axis)
    return ScalarVolume(mask.shape, spacing, np.sqrt(np.ascontiguousarray(f)))


# ---------------------------------------------------------------------------
# morphological reconstruction by dilation (26-connectivity)
# ---------------------------------------------------------------------------

def _offsets26():
    off = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dz or dy or dx:
                    off.append((dz, dy, dx))
    return np.array(off, dtype=np.int64)

_OFF26 = _offsets26()
# neighbors visited before (after) the center in raster order
_OFF26_PREV = np.array(
    [o for o in _OFF26.tolist() if tuple(o) < (0, 0, 0)], dtype=np.int64
)
_OFF26_NEXT = np.array(
    [o for o in _OFF26.tolist() if tuple(o) > (0, 0, 0)], dtype=np.int64
)


@njit(cache=True)
def _reconstruct_hybrid(marker, mask, offs_prev, offs_next, offs_all):
    Z, Y, X = mask.shape
    J = marker.copy()
    # raster scan
    for z in range(Z):
        for y in range(Y):
            for x in range(X):
                m = J[z, y, x]
                for o in range(offs_prev.shape[0]):
                    zz = z + offs_prev[o, 0]
                    yy = y + offs_prev[o, 1]
                    xx = x + offs_prev[o, 2]
                    if 0 <= zz < Z and 0 <= yy < Y and 0 <= xx < X:
                        if J[zz, yy, xx] > m:
                            m = J[zz, yy, xx]
                if m > mask[z, y, x]:
                    m = mask[z, y, x]
                J[z, y, x] = m
    # anti-raster scan, queueing voxels with an unstable downstream neighbor
    qcap = 1024
    queue = np.empty(qcap, np.int64)
    qn = 0
    for z in range(Z - 1, -1, -1):
        for y in range(Y - 1, -1, -1):
            for x in range(X - 1, -1, -1):
                m = J[z, y, x]
                for o in range(offs_next.shape[0]):
                    zz = z + offs_next[o, 0]
                    yy = y + offs_next[o, 1]
                    xx = x + offs_next[o, 2]
                    if 0 <= zz < Z and 0 <= yy < Y and 0 <= xx < X:
                        if J[zz, yy, xx] > m:
                            m = J[zz, yy, xx]
                if m > mask[z, y, x]:
                    m = mask[z, y, x]
                J[z, y, x] = m
                for o in range(offs_next.shape[0]):
                    zz = z + offs_next[o, 0]
                    yy = y + offs_next[o, 1]
                    xx = x + offs_next[o, 2]
                    if 0 <= zz < Z and 0 <= yy < Y and 0 <= xx < X:
                        if J[zz, yy, xx] < m and J[zz, yy, xx] < mask[zz, yy, xx]:
                            if qn == qcap:
                                qcap *= 2
                                grown = np.empty(qcap, np.int64)
                                grown[:qn] = queue[:qn]
                                queue = grown
                            queue[qn] = (z * Y + y) * X + x
                            qn += 1
                            break
    # FIFO propagation
    head = 0
    while head < qn:
        p = queue[head]
        head += 1
        z = p // (Y * X)
        y = (p // X) % Y
        x = p % X
        jp = J[z, y, x]
        for o in range(offs_all.shape[0]):
            zz = z + offs_all[o, 0]
            yy = y + offs_all[o, 1]
            xx = x + offs_all[o, 2]
            if 0 <= zz < Z and 0 <= yy < Y and 0 <= xx < X:
                jq = J[zz, yy, xx]
                if jq < jp and jq != mask[zz, yy, xx]:
                    nv = jp if jp < mask[zz, yy, xx] else mask[zz, yy, xx]
                    if nv > jq:
                        J[zz, yy, xx] = nv
                        if qn == qcap:
                            # drop the consumed prefix, then grow if still full
                            if head > 0:
                                for i in range(qn - head):
                                    queue[i] = queue[head + i]
                                qn -= head
                                head = 0
                            if qn == qcap:
                                qcap *= 2
                                grown = np.empty(qcap, np.int64)
                                grown[:qn] = queue[:qn]
                                queue = grown
                        queue[qn] = (zz * Y + yy) * X + xx
                        qn += 1
    return J


def reconstruct_by_dilation(marker: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Grayscale geodesic reconstruction of marker under mask, 26-connectivity.

    Hybrid raster/anti-raster sweep plus a FIFO queue; output J satisfies
    marker <= J <= mask and is the largest such image stable under
    J = min(dilate26(J), mask).
    """
    marker = np.asarray(marker, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if marker.shape != mask.shape:
        raise DataError("reconstruct_by_dilation: marker/mask shape mismatch")
    if np.any(marker > mask):
        raise DataError("reconstruct_by_dilation requires marker <= mask")
    return _reconstruct_hybrid(marker, mask, _OFF26_PREV, _OFF26_NEXT, _OFF26)


@njit(cache=True)
def _regional_max_labels(rec, offs_all):
    """Label 26-connected plateaus of rec that have no strictly greater neighbor."""
    Z, Y, X = rec.shape
    labels = np.zeros((Z, Y, X), np.int32)
    visited = np.zeros((Z, Y, X), np.uint8)
    stack = np.empty(Z * Y * X, np.int64)
    members = np.empty(Z * Y * X, np.int64)
    next_label = 0
    for z0 in range(Z):
        for y0 in range(Y):
            for x0 in range(X):
                if visited[z0, y0, x0]:
                    continue
                val = rec[z0, y0, x0]
                sn = 1
                stack[0] = (z0 * Y + y0) * X + x0
                visited[z0, y0, x0] = 1
                mn = 0
                has_greater = False
                while sn > 0:
                    sn -= 1
                    p = stack[sn]
                    members[mn] = p
                    mn += 1
                    z = p // (Y * X)
                    y = (p // X) % Y
                    x = p % X
                    for o in range(offs_all.shape[0]):
                        zz = z + offs_all[o, 0]
                        yy = y + offs_all[o, 1]
                        xx = x + offs_all[o, 2]
                        if 0 <= zz < Z and 0 <= yy < Y and 0 <= xx < X:
                            v = rec[zz, yy, xx]
                            if v > val:
                                has_greater = True
                            elif v == val and not visited[zz, yy, xx]:
                                visited[zz, yy, xx] = 1
                                stack[sn] = (zz * Y + yy) * X + xx
                                sn += 1
                if not has_greater:
                    next_label += 1
                    for i in range(mn):
                        p = members[i]
                        labels[p // (Y * X), (p // X) % Y, p % X] = next_label
    return labels, next_label


def h_maxima_seeds(d: ScalarVolume, h: float) -> SeedSet:
    """Seeds from H-maxima of a distance map.

    Reconstruction-by-dilation of (d - h) under d suppresses maxima whose
    relief is below h; regional maxima of the reconstruction become seed
    regions.  Components lying entirely on the membrane (d == 0) are dropped.
    Zero surviving maxima is signaled with a warning, not an error.
    """
    if h <= 0:
        raise DataError("h_maxima_seeds requires H > 0")
    dv = d.data.astype(np.float64)
    if h >= dv.max():
        warnings.warn("H >= max(distance): all maxima suppressed, zero seeds")
        return SeedSet([], h)
    rec = _reconstruct_hybrid(dv - h, dv, _OFF26_PREV, _OFF26_NEXT, _OFF26)
    labels, n = _regional_max_labels(rec, _OFF26)
    labels[dv <= 0.0] = 0
    seeds = []
    new_label = 0
    for lab in range(1, n + 1):
        coords = np.argwhere(labels == lab).astype(np.int32)
        if coords.shape[0] == 0:
            continue
        new_label += 1
        seeds.append((coords, new_label))
    if not seeds:
        warnings.warn("all regional maxima fell on the membrane mask, zero seeds")
    return SeedSet(seeds, h)


def generate_seeds(q: ScalarVolume, h: float) -> SeedSet:
    """Full seeding chain on a probability map: Otsu -> EDT -> H-maxima."""
    t = otsu_threshold(q)
    membrane = q.as_float().data >= t
    dist = distance_transform(membrane, q.spacing)
    out = h_maxima_seeds(dist, h)
    out.threshold = t
    return out


def region_interior_points(labels: LabelVolume) -> list[tuple[int, int, int, int]]:
    """Most-interior voxel (max distance to the region complement) per label.

    Deterministic: the first raster-order argmax wins.  Useful as
    ground-truth seed markers and for seed visualization.
    """
    pts = []
    data = labels.data
    for lab in labels.label_set():
        region = data == lab
        zs, ys, xs = np.nonzero(region)
        lo = (zs.min(), ys.min(), xs.min())
        hi = (zs.max() + 1, ys.max() + 1, xs.max() + 1)
        # pad by one voxel so the complement is visible to the EDT
        lo = tuple(max(v - 1, 0) for v in lo)
        hi = tuple(min(h + 1, s) for h, s in zip(hi, data.shape))
        sub = region[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        comp = ~sub
        if not comp.any():  # single label fills the whole volume
            pts.append((int(zs[0]), int(ys[0]), int(xs[0]), int(lab)))
            continue
        dist = distance_transform(comp, labels.spacing).data
        dist[comp] = -1.0
        flat = int(np.argmax(dist))
        z, y, x = np.unravel_index(flat, dist.shape)
        pts.append((int(z + lo[0]), int(y + lo[1]), int(x + lo[2]), int(lab)))
    return pts

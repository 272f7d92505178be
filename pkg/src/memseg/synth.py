"""Synthetic ground-truth volumes: Voronoi foam cells with membrane signal.

Stands in for real confocal stacks in tests and benchmarks.  Cell centers
come from Poisson-disk sampling, truth labels are the Voronoi partition
under the physical metric, and the membrane channel is a Gaussian profile
of the distance to the label-boundary voxels.  All randomness is drawn
from the counter-based Philox generator so outputs are bitwise
reproducible for a given seed.
"""

from __future__ import annotations

import numpy as np

from .seeding import distance_transform
from .volume import DataError, LabelVolume, ScalarVolume


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def voronoi_labels(dims, spacing, centers) -> LabelVolume:
    """Voronoi partition of the grid around physical-space centers (um).

    Ties go to the lowest center index.  Labels are center index + 1.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[1] != 3 or centers.shape[0] < 1:
        raise DataError("centers must be a non-empty (n, 3) array")
    Z, Y, X = dims
    zc = np.arange(Z) * spacing[0]
    yc = np.arange(Y) * spacing[1]
    xc = np.arange(X) * spacing[2]
    best = np.full(dims, np.inf)
    labels = np.zeros(dims, dtype=np.uint32)
    for i, (cz, cy, cx) in enumerate(centers):
        d2 = (
            ((zc - cz) ** 2)[:, None, None]
            + ((yc - cy) ** 2)[None, :, None]
            + ((xc - cx) ** 2)[None, None, :]
        )
        closer = d2 < best
        best[closer] = d2[closer]
        labels[closer] = i + 1
    return LabelVolume(dims, spacing, labels, num_labels=centers.shape[0])


def _poisson_disk(extent, n, min_sep, rng, max_tries=20000):
    pts = np.empty((n, 3))
    placed = 0
    tries = 0
    while placed < n:
        if tries >= max_tries:
            raise DataError(
                f"could not place {n} centers with separation {min_sep:.2f} um "
                f"in a {extent} um box"
            )
        cand = rng.uniform(0.0, 1.0, 3) * extent
        if placed == 0 or np.min(np.linalg.norm(pts[:placed] - cand, axis=1)) >= min_sep:
            pts[placed] = cand
            placed += 1
        tries += 1
    return pts


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Voxels with a 6-neighbor carrying a different label."""
    b = np.zeros(labels.shape, dtype=bool)
    for axis in range(3):
        sl_a = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        diff = labels[tuple(sl_a)] != labels[tuple(sl_b)]
        b[tuple(sl_a)] |= diff
        b[tuple(sl_b)] |= diff
    return b


def membrane_from_labels(truth: LabelVolume, membrane_width: float) -> ScalarVolume:
    """Membrane intensity exp(-d^2 / 2 sigma^2) of the boundary distance d."""
    bmask = boundary_mask(truth.data)
    if not bmask.any():
        return ScalarVolume(truth.dims, truth.spacing,
                            np.zeros(truth.dims, dtype=np.float32))
    sigma = membrane_width / 2.0
    d = distance_transform(bmask, truth.spacing).data
    raw = np.exp(-(d * d) / (2.0 * sigma * sigma)).astype(np.float32)
    return ScalarVolume(truth.dims, truth.spacing, raw)


def make_foam(dims, spacing, n_cells, membrane_width, rng_seed,
              protrusions=0, protrusion_radius=1.5):
    """Synthetic membrane-tagged stack with ground-truth labels.

    Returns (raw, truth).  Optional hemispherical protrusion bumps are
    carved on random cell faces: voxels of the neighboring cell within
    protrusion_radius (um) of a boundary point are reassigned to the owner,
    so the truth keeps exactly n_cells labels but gains salient boundary
    features.
    """
    if n_cells < 1:
        raise DataError("n_cells must be >= 1")
    if membrane_width < min(spacing):
        raise DataError("membrane_width must cover at least one voxel in the finest axis")
    rng = _rng(rng_seed)
    extent = np.array([(d - 1) * s for d, s in zip(dims, spacing)])
    # target roughly equal cells; separation scales with the cell pitch
    min_sep = 0.55 * float(np.prod(extent + 1e-9)) ** (1.0 / 3.0) / max(n_cells, 1) ** (1.0 / 3.0)
    centers = _poisson_disk(extent, n_cells, min_sep, rng)
    truth = voronoi_labels(dims, spacing, centers)
    if len(truth.label_set()) != n_cells:
        raise DataError("degenerate packing: a Voronoi cell owns no voxel")
    labels = truth.data.copy()
    for _ in range(int(protrusions)):
        labels = _add_protrusion(labels, spacing, protrusion_radius, rng)
    truth = LabelVolume(dims, spacing, labels, num_labels=n_cells)
    raw = membrane_from_labels(truth, membrane_width)
    return raw, truth


def _add_protrusion(labels, spacing, radius, rng):
    bmask = boundary_mask(labels)
    coords = np.argwhere(bmask)
    if coords.shape[0] == 0:
        return labels
    z, y, x = coords[rng.integers(coords.shape[0])]
    owner = labels[z, y, x]
    # first 6-neighbor with a different label becomes the invaded cell
    other = 0
    for dz, dy, dx in ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)):
        zz, yy, xx = z + dz, y + dy, x + dx
        if 0 <= zz < labels.shape[0] and 0 <= yy < labels.shape[1] and 0 <= xx < labels.shape[2]:
            if labels[zz, yy, xx] != owner:
                other = labels[zz, yy, xx]
                break
    if other == 0:
        return labels
    Z, Y, X = labels.shape
    c = np.array([z * spacing[0], y * spacing[1], x * spacing[2]])
    zc = np.arange(Z) * spacing[0]
    yc = np.arange(Y) * spacing[1]
    xc = np.arange(X) * spacing[2]
    d2 = (
        ((zc - c[0]) ** 2)[:, None, None]
        + ((yc - c[1]) ** 2)[None, :, None]
        + ((xc - c[2]) ** 2)[None, None, :]
    )
    bump = (d2 <= radius * radius) & (labels == other)
    # never swallow the invaded cell whole
    if bump.sum() >= (labels == other).sum():
        return labels
    out = labels.copy()
    out[bump] = owner
    return out


def degrade(raw: ScalarVolume, noise_sigma, attenuation_per_z, gap_fraction,
            rng_seed, gap_radius=1.0):
    """Controlled degradations of a clean membrane stack.

    Erases random membrane patches (balls of gap_radius um centered on
    membrane voxels until gap_fraction of the membrane area is dark), then
    applies exp(-attenuation * z) per slice, then adds Gaussian noise;
    the result is clamped to [0, 1].  Deterministic for a given seed.
    """
    if noise_sigma < 0 or attenuation_per_z < 0 or gap_fraction < 0:
        raise DataError("degrade parameters must be >= 0")
    rng = _rng(rng_seed)
    data = raw.as_float().data.astype(np.float64)
    Z, Y, X = raw.dims
    if gap_fraction > 0:
        membrane = data >= 0.5
        coords = np.argwhere(membrane)
        n_mem = coords.shape[0]
        if n_mem:
            target = int(np.ceil(gap_fraction * n_mem))
            order = rng.permutation(n_mem)
            erased = np.zeros(raw.dims, dtype=bool)
            sz, sy, sx = raw.spacing
            rz = int(gap_radius / sz)
            ry = int(gap_radius / sy)
            rx = int(gap_radius / sx)
            n_erased = 0
            for oi in order:
                z, y, x = coords[oi]
                if erased[z, y, x]:
                    continue
                zlo, zhi = max(z - rz, 0), min(z + rz + 1, Z)
                ylo, yhi = max(y - ry, 0), min(y + ry + 1, Y)
                xlo, xhi = max(x - rx, 0), min(x + rx + 1, X)
                lz = (np.arange(zlo, zhi) - z) * sz
                ly = (np.arange(ylo, yhi) - y) * sy
                lx = (np.arange(xlo, xhi) - x) * sx
                ball = (
                    (lz * lz)[:, None, None]
                    + (ly * ly)[None, :, None]
                    + (lx * lx)[None, None, :]
                ) <= gap_radius * gap_radius
                patch = (slice(zlo, zhi), slice(ylo, yhi), slice(xlo, xhi))
                newly = ball & membrane[patch] & ~erased[patch]
                n_erased += int(newly.sum())
                erased[patch] |= ball
                data[patch][ball] = 0.0
                if n_erased >= target:
                    break
    if attenuation_per_z > 0:
        data *= np.exp(-attenuation_per_z * np.arange(Z))[:, None, None]
    if noise_sigma > 0:
        data = data + rng.normal(0.0, noise_sigma, size=data.shape)
    data = np.clip(data, 0.0, 1.0)
    return ScalarVolume(raw.dims, raw.spacing, data.astype(np.float32))


def manifest_text(params: dict) -> str:
    """key = value manifest of generation parameters."""
    lines = [f"{k} = {v}" for k, v in params.items()]
    return "\n".join(lines) + "\n"

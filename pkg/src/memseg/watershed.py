"""Seeded 3D watershed by priority flood on the membrane probability map.

Every voxel joins exactly one basin (no ridge label); the boundary is the
label-change surface.  The flood is a single min-priority queue keyed by
(probability, insertion counter), so results are bitwise deterministic and
ties resolve FIFO.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .seeding import SeedSet
from .volume import DataError, LabelVolume, ScalarVolume


@njit(cache=True)
def _flood(q, labels, keys_out, trace):
    Z, Y, X = q.shape
    n = Z * Y * X
    qf = q.reshape(n)
    lf = labels.reshape(n)
    heap_key = np.empty(n, np.float64)
    heap_seq = np.empty(n, np.int64)
    heap_idx = np.empty(n, np.int64)
    size = 0
    seq = 0

    # seed voxels enter in raster order
    for p in range(n):
        if lf[p] != 0:
            heap_key[size] = qf[p]
            heap_seq[size] = seq
            heap_idx[size] = p
            seq += 1
            size += 1
            i = size - 1
            while i > 0:
                par = (i - 1) // 2
                if heap_key[i] < heap_key[par] or (
                    heap_key[i] == heap_key[par] and heap_seq[i] < heap_seq[par]
                ):
                    heap_key[i], heap_key[par] = heap_key[par], heap_key[i]
                    heap_seq[i], heap_seq[par] = heap_seq[par], heap_seq[i]
                    heap_idx[i], heap_idx[par] = heap_idx[par], heap_idx[i]
                    i = par
                else:
                    break

    popped = 0
    while size > 0:
        key = heap_key[0]
        p = heap_idx[0]
        if trace:
            keys_out[popped] = key
        popped += 1
        size -= 1
        heap_key[0] = heap_key[size]
        heap_seq[0] = heap_seq[size]
        heap_idx[0] = heap_idx[size]
        i = 0
        while True:
            l = 2 * i + 1
            r = l + 1
            small = i
            if l < size and (
                heap_key[l] < heap_key[small]
                or (heap_key[l] == heap_key[small] and heap_seq[l] < heap_seq[small])
            ):
                small = l
            if r < size and (
                heap_key[r] < heap_key[small]
                or (heap_key[r] == heap_key[small] and heap_seq[r] < heap_seq[small])
            ):
                small = r
            if small == i:
                break
            heap_key[i], heap_key[small] = heap_key[small], heap_key[i]
            heap_seq[i], heap_seq[small] = heap_seq[small], heap_seq[i]
            heap_idx[i], heap_idx[small] = heap_idx[small], heap_idx[i]
            i = small

        lab = lf[p]
        z = p // (Y * X)
        y = (p // X) % Y
        x = p % X
        for o in range(6):
            if o == 0:
                zz, yy, xx = z - 1, y, x
            elif o == 1:
                zz, yy, xx = z + 1, y, x
            elif o == 2:
                zz, yy, xx = z, y - 1, x
            elif o == 3:
                zz, yy, xx = z, y + 1, x
            elif o == 4:
                zz, yy, xx = z, y, x - 1
            else:
                zz, yy, xx = z, y, x + 1
            if not (0 <= zz < Z and 0 <= yy < Y and 0 <= xx < X):
                continue
            nb = (zz * Y + yy) * X + xx
            if lf[nb] == 0:
                lf[nb] = lab
                nk = qf[nb]
                if nk < key:
                    nk = key
                heap_key[size] = nk
                heap_seq[size] = seq
                heap_idx[size] = nb
                seq += 1
                size += 1
                i = size - 1
                while i > 0:
                    par = (i - 1) // 2
                    if heap_key[i] < heap_key[par] or (
                        heap_key[i] == heap_key[par] and heap_seq[i] < heap_seq[par]
                    ):
                        heap_key[i], heap_key[par] = heap_key[par], heap_key[i]
                        heap_seq[i], heap_seq[par] = heap_seq[par], heap_seq[i]
                        heap_idx[i], heap_idx[par] = heap_idx[par], heap_idx[i]
                        i = par
                    else:
                        break
    return popped


def seeded_watershed(q: ScalarVolume, seeds: SeedSet, _trace=False):
    """Priority-flood watershed; returns a complete LabelVolume.

    Seed voxels enqueue at their own probability; popped voxels claim
    unlabeled 6-neighbors, which enqueue at max(q[neighbor], popped key).
    With _trace=True additionally returns the popped-key sequence (test
    hook for the monotone-flood property).
    """
    if seeds.num_seeds == 0:
        raise DataError("seeded_watershed requires a non-empty SeedSet")
    qv = q.as_float()
    if not qv.is_probability_map():
        raise DataError("seeded_watershed expects a probability map in [0, 1]")
    labels = seeds.to_label_volume(q.dims, q.spacing).data.astype(np.uint32)
    qdata = np.ascontiguousarray(qv.data.astype(np.float64))
    keys = np.empty(labels.size, np.float64) if _trace else np.empty(1, np.float64)
    _flood(qdata, labels, keys, _trace)
    out = LabelVolume(q.dims, q.spacing, labels, num_labels=seeds.num_seeds)
    if _trace:
        return out, keys
    return out


def compact_labels(x: LabelVolume) -> LabelVolume:
    """Relabel to consecutive 1..L preserving the partition; idempotent."""
    present = x.label_set()
    if present.size == 0:
        return LabelVolume(x.dims, x.spacing, np.zeros(x.dims, np.uint32), num_labels=0)
    lut = np.zeros(int(present.max()) + 1, dtype=np.uint32)
    lut[present] = np.arange(1, present.size + 1, dtype=np.uint32)
    return LabelVolume(x.dims, x.spacing, lut[x.data], num_labels=present.size)

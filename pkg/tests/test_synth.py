import numpy as np
import pytest

from memseg import synth
from memseg.volume import DataError


def test_single_cell_no_membrane():
    raw, truth = synth.make_foam((8, 8, 8), (0.5, 0.5, 0.5), 1, 1.0, rng_seed=0)
    assert np.all(raw.data == 0.0)
    assert truth.num_labels == 1
    assert np.all(truth.data == 1)


def test_two_cells_bisector_plane():
    centers = np.array([[2.0, 2.0, 1.0], [2.0, 2.0, 7.0]])
    truth = synth.voronoi_labels((9, 9, 16), (0.5, 0.5, 0.5), centers)
    # perpendicular bisector of x = 1 um and x = 7 um is x = 4 um = voxel 8;
    # the equidistant voxel goes to the lower label
    assert np.all(truth.data[:, :, :9] == 1)
    assert np.all(truth.data[:, :, 9:] == 2)


def test_voronoi_tie_breaks_to_lower_label():
    centers = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 2.0]])
    truth = synth.voronoi_labels((1, 1, 3), (1.0, 1.0, 1.0), centers)
    assert truth.data.ravel().tolist() == [1, 1, 2]


def test_partition_and_label_count():
    for seed in range(3):
        _, truth = synth.make_foam((24, 24, 24), (0.5, 0.5, 0.5), 6, 1.0, rng_seed=seed)
        labs = np.unique(truth.data)
        assert labs.tolist() == list(range(1, 7))


def test_determinism_bitwise():
    a_raw, a_truth = synth.make_foam((16, 16, 16), (0.5, 0.5, 0.5), 4, 1.0, rng_seed=7)
    b_raw, b_truth = synth.make_foam((16, 16, 16), (0.5, 0.5, 0.5), 4, 1.0, rng_seed=7)
    assert np.array_equal(a_raw.data, b_raw.data)
    assert np.array_equal(a_truth.data, b_truth.data)
    c_raw, _ = synth.make_foam((16, 16, 16), (0.5, 0.5, 0.5), 4, 1.0, rng_seed=8)
    assert not np.array_equal(a_raw.data, c_raw.data)


def test_membrane_bright_on_boundaries():
    raw, truth = synth.make_foam((24, 24, 24), (0.5, 0.5, 0.5), 4, 1.0, rng_seed=1)
    b = synth.boundary_mask(truth.data)
    assert raw.data[b].min() > 0.6
    assert raw.data[~b].mean() < 0.35
    assert raw.data.min() >= 0.0 and raw.data.max() <= 1.0


def test_protrusions_keep_label_count():
    _, truth = synth.make_foam((24, 24, 24), (0.5, 0.5, 0.5), 5, 1.0, rng_seed=2,
                               protrusions=3)
    assert len(np.unique(truth.data)) == 5


def test_impossible_packing_rejected():
    with pytest.raises(DataError, match="could not place|packing"):
        synth.make_foam((4, 4, 4), (0.5, 0.5, 0.5), 500, 0.5, rng_seed=0)


def test_membrane_width_must_cover_a_voxel():
    with pytest.raises(DataError, match="membrane_width"):
        synth.make_foam((8, 8, 8), (0.5, 0.5, 0.5), 2, 0.1, rng_seed=0)


class TestDegrade:
    def test_all_zero_params_identity(self):
        raw, _ = synth.make_foam((12, 12, 12), (0.5, 0.5, 0.5), 3, 1.0, rng_seed=3)
        out = synth.degrade(raw, 0.0, 0.0, 0.0, rng_seed=0)
        assert np.array_equal(out.data, raw.data)

    def test_attenuation_slice_means_decay_geometrically(self):
        raw, _ = synth.make_foam((10, 16, 16), (0.5, 0.5, 0.5), 3, 1.0, rng_seed=4)
        a = 0.2
        out = synth.degrade(raw, 0.0, a, 0.0, rng_seed=0)
        means0 = raw.data.mean(axis=(1, 2))
        means1 = out.data.mean(axis=(1, 2))
        expect = means0 * np.exp(-a * np.arange(10))
        assert np.allclose(means1, expect, rtol=1e-6)

    def test_gap_fraction_erases_membrane(self):
        raw, _ = synth.make_foam((20, 20, 20), (0.5, 0.5, 0.5), 4, 1.0, rng_seed=5)
        membrane = raw.data >= 0.5
        out = synth.degrade(raw, 0.0, 0.0, 0.2, rng_seed=9)
        erased = membrane & (out.data == 0.0)
        frac = erased.sum() / membrane.sum()
        assert frac >= 0.2
        assert frac < 0.8  # patches, not wholesale erasure

    def test_noise_clipped_to_unit_range(self):
        raw, _ = synth.make_foam((10, 10, 10), (0.5, 0.5, 0.5), 3, 1.0, rng_seed=6)
        out = synth.degrade(raw, 0.3, 0.0, 0.0, rng_seed=1)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_deterministic(self):
        raw, _ = synth.make_foam((10, 10, 10), (0.5, 0.5, 0.5), 3, 1.0, rng_seed=6)
        a = synth.degrade(raw, 0.1, 0.05, 0.1, rng_seed=42)
        b = synth.degrade(raw, 0.1, 0.05, 0.1, rng_seed=42)
        assert np.array_equal(a.data, b.data)

    def test_negative_params_rejected(self):
        raw, _ = synth.make_foam((8, 8, 8), (0.5, 0.5, 0.5), 2, 1.0, rng_seed=0)
        with pytest.raises(DataError):
            synth.degrade(raw, -0.1, 0.0, 0.0, rng_seed=0)


def test_manifest_text():
    text = synth.manifest_text({"n_cells": 20, "rng_seed": 7})
    assert "n_cells = 20" in text and "rng_seed = 7" in text

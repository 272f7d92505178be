import math

import numpy as np
import pytest

from _oracles import brute_kernel_matrix, dense_gaussian_conv
from memseg import crf
from memseg.volume import DataError, LabelVolume, ScalarVolume


def _rand_instance(rng, dims, L):
    spacing = tuple(rng.uniform(0.2, 1.0, 3))
    q = ScalarVolume(dims, spacing, rng.random(dims, dtype=np.float32))
    marg = rng.random((*dims, L))
    marg /= marg.sum(-1, keepdims=True)
    return q, marg


class TestParams:
    def test_validation(self):
        with pytest.raises(DataError):
            crf.CrfParams(sigma_alpha=0.0)
        with pytest.raises(DataError):
            crf.CrfParams(w1=-1.0)
        with pytest.raises(DataError):
            crf.CrfParams(iterations=0)
        with pytest.raises(DataError):
            crf.CrfParams(epsilon=0.0)
        with pytest.raises(DataError):
            crf.CrfParams(compat="linear")

    def test_default_radius(self):
        p = crf.CrfParams(sigma_alpha=2.0)
        assert p.radius == 6.0
        assert crf.CrfParams(cand_radius=1.5).radius == 1.5


class TestKernel:
    def test_identical_features(self):
        p = crf.CrfParams(w1=5.0, w2=3.0)
        f = crf.FeatureVector((1.0, 2.0, 3.0), 0.4)
        assert crf.kernel_value(f, f, p) == pytest.approx(8.0, abs=1e-15)

    def test_unit_separation(self):
        p = crf.CrfParams(w1=5.0, w2=3.0, sigma_alpha=1.0, sigma_gamma=1.0)
        fi = crf.FeatureVector((0.0, 0.0, 0.0), 0.5)
        fj = crf.FeatureVector((0.0, 0.0, 1.0), 0.5)
        assert crf.kernel_value(fi, fj, p) == pytest.approx(8.0 * math.exp(-0.5), rel=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        p = crf.CrfParams()
        for _ in range(20):
            fi = crf.FeatureVector(tuple(rng.uniform(0, 5, 3)), float(rng.random()))
            fj = crf.FeatureVector(tuple(rng.uniform(0, 5, 3)), float(rng.random()))
            assert crf.kernel_value(fi, fj, p) == pytest.approx(
                crf.kernel_value(fj, fi, p), rel=1e-14)


class TestUnary:
    def test_interior_voxel_near_zero_cost(self):
        q = ScalarVolume((1, 1, 2), (1, 1, 1), np.array([0.0, 0.2], np.float32))
        x0 = LabelVolume((1, 1, 2), (1, 1, 1), np.array([3, 3], np.uint32), num_labels=3)
        cand, unary = crf.unary_from_watershed(q, x0, 1e-6)
        own = unary[0, cand[0] == 3][0]
        assert own == pytest.approx(0.0, abs=1e-5)

    def test_certain_membrane_flat(self):
        q = ScalarVolume((1, 1, 2), (1, 1, 1), np.array([1.0, 1.0], np.float32))
        x0 = LabelVolume((1, 1, 2), (1, 1, 1), np.array([1, 2], np.uint32), num_labels=2)
        cand, unary = crf.unary_from_watershed(q, x0, 1e-6)
        assert np.allclose(unary[0], unary[0][0])

    def test_hand_computed_values(self):
        # q = 0.5, two labels, eps = 1e-6: P = (0.5, 1e-6) / 0.500001
        q = ScalarVolume((1, 1, 1), (1, 1, 1), np.array([0.5], np.float32))
        x0 = LabelVolume((1, 1, 1), (1, 1, 1), np.array([1], np.uint32), num_labels=2)
        cand = np.array([[1, 2]], np.int32)
        cand, unary = crf.unary_from_watershed(q, x0, 1e-6, cand)
        z = 0.5 + 1e-6
        assert unary[0, 0] == pytest.approx(-math.log(0.5 / z), abs=1e-9)
        assert unary[0, 1] == pytest.approx(-math.log(1e-6 / z), abs=1e-9)

    def test_eps_bound_enforced(self):
        q = ScalarVolume((1, 1, 1), (1, 1, 1), np.array([0.5], np.float32))
        x0 = LabelVolume((1, 1, 1), (1, 1, 1), np.array([1], np.uint32), num_labels=4)
        with pytest.raises(DataError, match="epsilon"):
            crf.unary_from_watershed(q, x0, 0.3)


class TestCandidates:
    def test_own_label_always_candidate(self):
        rng = np.random.default_rng(1)
        lab = rng.integers(1, 4, (5, 5, 5)).astype(np.uint32)
        x0 = LabelVolume((5, 5, 5), (1, 1, 1), lab)
        cand = crf.candidate_labels(x0, 0.5)
        flat = lab.reshape(-1)
        assert all(flat[i] in cand[i] for i in range(flat.size))

    def test_radius_controls_reach(self):
        lab = np.ones((1, 1, 10), np.uint32)
        lab[0, 0, 5:] = 2
        x0 = LabelVolume((1, 1, 10), (1, 1, 1), lab)
        narrow = crf.candidate_labels(x0, 1.0)
        assert narrow[0].tolist() == [1, 0]       # far from label 2
        assert sorted(narrow[4][narrow[4] > 0].tolist()) == [1, 2]
        wide = crf.candidate_labels(x0, 20.0)
        assert sorted(wide[0][wide[0] > 0].tolist()) == [1, 2]


class TestMessages:
    def test_two_voxel_kernel_values(self):
        p = crf.CrfParams(w1=5.0, w2=3.0, sigma_alpha=1.0, sigma_beta=0.1, sigma_gamma=1.0)
        q = ScalarVolume((1, 1, 2), (1, 1, 1.0), np.array([0.3, 0.3], np.float32))
        marg = np.zeros((1, 1, 2, 2))
        marg[0, 0, 0, 0] = 1.0
        marg[0, 0, 1, 1] = 1.0
        out = crf.pairwise_message_bruteforce(marg, q, p)
        k = 8.0 * math.exp(-0.5)
        assert out[0, 0, 0, 1] == pytest.approx(k, rel=1e-12)
        assert out[0, 0, 0, 0] == 0.0  # self excluded

    def test_bruteforce_matches_kernel_matrix_oracle(self):
        rng = np.random.default_rng(2)
        q, marg = _rand_instance(rng, (4, 4, 4), 3)
        p = crf.CrfParams(w1=2.0, w2=1.0, sigma_alpha=1.0, sigma_beta=0.2, sigma_gamma=0.7)
        out = crf.pairwise_message_bruteforce(marg, q, p)
        zz, yy, xx = np.meshgrid(*[np.arange(d) * s for d, s in zip(q.dims, q.spacing)],
                                 indexing="ij")
        coords = np.stack([zz.ravel(), yy.ravel(), xx.ravel()], 1)
        k = brute_kernel_matrix(coords, q.data.reshape(-1).astype(np.float64), p)
        expect = (k @ marg.reshape(64, 3)).reshape(out.shape)
        assert np.allclose(out, expect, rtol=1e-12, atol=1e-12)

    def test_bruteforce_guard(self):
        rng = np.random.default_rng(3)
        q, marg = _rand_instance(rng, (17, 17, 17), 2)
        with pytest.raises(DataError, match="brute-force"):
            crf.pairwise_message_bruteforce(marg, q, crf.CrfParams())

    def test_fast_matches_bruteforce(self):
        rng = np.random.default_rng(4)
        for _ in range(15):
            dims = tuple(rng.integers(3, 9, 3))
            L = int(rng.integers(2, 5))
            q, marg = _rand_instance(rng, dims, L)
            p = crf.CrfParams(w1=float(rng.uniform(0.5, 8)), w2=float(rng.uniform(0.5, 5)),
                              sigma_alpha=float(rng.uniform(0.5, 3)),
                              sigma_beta=float(rng.uniform(0.05, 0.3)),
                              sigma_gamma=float(rng.uniform(0.3, 2)))
            bf = crf.pairwise_message_bruteforce(marg, q, p)
            fast = crf.pairwise_message_fast(marg, q, p)
            rel = np.linalg.norm(fast - bf) / np.linalg.norm(bf)
            assert rel <= 1e-2

    def test_uniform_marginals_give_uniform_messages(self):
        rng = np.random.default_rng(5)
        dims = (5, 5, 5)
        spacing = (0.5, 0.5, 0.5)
        q = ScalarVolume(dims, spacing, rng.random(dims, dtype=np.float32))
        marg = np.full((*dims, 3), 1 / 3)
        out = crf.pairwise_message_fast(marg, q, crf.CrfParams(w1=2, w2=1))
        spread = np.abs(out - out.mean(axis=-1, keepdims=True)).max()
        assert spread < 1e-10  # all labels filter identically

    def test_w1_zero_reduces_to_separable_blur(self):
        rng = np.random.default_rng(6)
        dims = (6, 6, 6)
        spacing = (0.5, 0.4, 0.6)
        q = ScalarVolume(dims, spacing, rng.random(dims, dtype=np.float32))
        L = 2
        marg = rng.random((*dims, L))
        marg /= marg.sum(-1, keepdims=True)
        p = crf.CrfParams(w1=0.0, w2=2.5, sigma_gamma=0.8)
        out = crf.pairwise_message_fast(marg, q, p)
        for l in range(L):
            direct = dense_gaussian_conv(marg[..., l], spacing, 0.8)
            expect = 2.5 * (direct - marg[..., l])
            rel = np.linalg.norm(out[..., l] - expect) / np.linalg.norm(expect)
            assert rel < 1e-3


def _foam_case(seed=0, dims=(24, 24, 24), cells=4):
    from memseg import preprocess, seeding, synth, watershed
    raw, truth = synth.make_foam(dims, (0.5, 0.5, 0.5), cells, 1.0, rng_seed=seed)
    q = preprocess.fallback_probmap(raw, 0.25)
    seeds = seeding.generate_seeds(q, 1.0)
    ws = watershed.seeded_watershed(q, seeds)
    return q, truth, ws


class TestMeanField:
    def test_zero_weights_identity(self):
        q, _, ws = _foam_case()
        out = crf.mean_field_refine(q, ws, crf.CrfParams(w1=0.0, w2=0.0))
        assert np.array_equal(out.data, ws.data)

    def test_marginal_normalization_invariant(self):
        q, _, ws = _foam_case(seed=1)
        params = crf.CrfParams(iterations=2)
        cand = crf.candidate_labels(ws, params.radius)
        cand, unary = crf.unary_from_watershed(q, ws, params.epsilon, cand)
        probs = crf._softmax_rows(-unary)
        sums = probs.sum(axis=1)
        assert np.all(np.isfinite(probs))
        assert np.abs(sums - 1.0).max() < 1e-6

    def test_label_subset_and_dims(self):
        q, _, ws = _foam_case(seed=2)
        out = crf.mean_field_refine(q, ws, crf.CrfParams(iterations=2))
        assert out.dims == ws.dims and out.spacing == ws.spacing
        assert set(np.unique(out.data)) <= set(np.unique(ws.data))

    def test_changed_counts_reported(self):
        q, _, ws = _foam_case(seed=3)
        out, diag = crf.mean_field_refine(q, ws, crf.CrfParams(iterations=3),
                                          return_diagnostics=True)
        assert len(diag["changed_per_iteration"]) == 3
        assert all(c >= 0 for c in diag["changed_per_iteration"])

    def test_deterministic(self):
        q, _, ws = _foam_case(seed=4)
        a = crf.mean_field_refine(q, ws, crf.CrfParams(iterations=2))
        b = crf.mean_field_refine(q, ws, crf.CrfParams(iterations=2))
        assert np.array_equal(a.data, b.data)

    def test_dims_mismatch_rejected(self):
        q, _, ws = _foam_case(seed=5)
        bad = ScalarVolume((2, 2, 2), (1, 1, 1), np.zeros((2, 2, 2), np.float32))
        with pytest.raises(DataError):
            crf.mean_field_refine(bad, ws, crf.CrfParams())

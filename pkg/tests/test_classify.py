import math

import numpy as np
import pytest

from visiongrid import errors
from visiongrid.classify import (
    CategoryPrior,
    ClassifierModel,
    CovarianceCache,
    HistogramBackend,
    compute_shared_covariance,
    extract_features,
    extract_features_cached,
    lda_extend_model,
    predict_top_k,
    ten_crop,
)
from visiongrid.storage import FeatureCache, ObjectStore


def checker_image(h=100, w=100, cell=10, seed=3):
    rng = np.random.default_rng(seed)
    base = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    mask = ((yy // cell + xx // cell) % 2).astype(np.uint8)
    return base * mask[:, :, None]


class TestTenCrop:
    def test_geometry_100x100_half(self):
        crops = ten_crop(np.zeros((100, 100, 3)), ratio=0.5)
        assert crops.side == 50
        assert crops.offsets == ((0, 0), (50, 0), (0, 50), (50, 50), (25, 25))
        assert all(p.shape == (50, 50, 3) for p in crops.patches)

    def test_crops_match_slices(self):
        img = checker_image()
        crops = ten_crop(img, ratio=0.5)
        assert np.array_equal(crops.patches[0], img[0:50, 0:50])
        assert np.array_equal(crops.patches[1], img[0:50, 50:100])
        assert np.array_equal(crops.patches[2], img[50:100, 0:50])
        assert np.array_equal(crops.patches[3], img[50:100, 50:100])
        assert np.array_equal(crops.patches[4], img[25:75, 25:75])

    def test_full_ratio_square_image(self):
        img = checker_image(64, 64, cell=8)
        crops = ten_crop(img, ratio=1.0)
        for patch in crops.patches[:5]:
            assert np.array_equal(patch, img)

    def test_mirrors_are_column_reversed(self):
        img = checker_image()
        crops = ten_crop(img, ratio=0.6)
        for i in range(5):
            assert np.array_equal(crops.patches[5 + i], crops.patches[i][:, ::-1])

    def test_degenerate_image(self):
        with pytest.raises(errors.DegenerateImage):
            ten_crop(np.zeros((1, 50, 3)))

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            ten_crop(np.zeros((10, 10, 3)), ratio=0.0)


class TestExtractFeatures:
    def test_shape_contract(self):
        backend = HistogramBackend()
        assert backend.dim == 64
        features = extract_features(checker_image(), backend)
        assert features.shape == (10, 64)
        assert np.all(np.isfinite(features))

    def test_constant_image_rows_equal(self):
        img = np.full((60, 80, 3), 77, dtype=np.uint8)
        features = extract_features(img, HistogramBackend())
        assert np.allclose(features, features[0])

    def test_mirror_rows_match_independent_recompute(self):
        # Rows 5..9 must equal features of the mirrored pixel arrays,
        # extracted directly without going through the crop set.
        backend = HistogramBackend()
        img = checker_image(90, 120, cell=7, seed=11)
        features = extract_features(img, backend, ratio=0.8)
        crops = ten_crop(img, ratio=0.8)
        for i in range(5):
            mirrored = np.asarray(crops.patches[i])[:, ::-1]
            expected = backend.extract(mirrored)
            assert np.array_equal(features[5 + i], expected)

    def test_cached_extraction(self, tmp_path):
        cache = FeatureCache(ObjectStore(tmp_path))
        backend = HistogramBackend()
        img = checker_image()
        m1, hit1 = extract_features_cached(img, backend, cache, "a" * 64)
        m2, hit2 = extract_features_cached(img, backend, cache, "a" * 64)
        assert (hit1, hit2) == (False, True)
        assert np.array_equal(m1, m2)
        # Different crop ratio changes the cache key.
        _, hit3 = extract_features_cached(img, backend, cache, "a" * 64, ratio=0.5)
        assert hit3 is False


class TestPredictTopK:
    def model(self, weights, biases, labels):
        w = np.asarray(weights, dtype=np.float64)
        return ClassifierModel(tuple(labels), w, np.asarray(biases, dtype=np.float64),
                               "hist", w.shape[1])

    def test_symmetric_logits_tie_break_by_label(self):
        model = self.model([[0.0], [0.0]], [0.0, 0.0], ["zebra", "aardvark"])
        result = predict_top_k(np.zeros(1), model, k=5)
        assert [r[0] for r in result] == ["aardvark", "zebra"]
        assert all(abs(c - 0.5) < 1e-12 for _, c in result)

    def test_softmax_values(self):
        # Independent evaluation of softmax((1, 0, -1)).
        exps = [math.exp(s) for s in (1.0, 0.0, -1.0)]
        expected = [e / sum(exps) for e in exps]
        model = self.model([[1.0], [0.0], [-1.0]], [0.0, 0.0, 0.0], ["a", "b", "c"])
        result = predict_top_k(np.array([1.0]), model, k=3)
        got = dict(result)
        assert abs(got["a"] - expected[0]) < 1e-12
        assert abs(got["b"] - expected[1]) < 1e-12
        assert abs(got["c"] - expected[2]) < 1e-12
        assert abs(got["a"] - 0.6652) < 1e-4 and abs(got["c"] - 0.0900) < 1e-4

    def test_k_truncates_to_num_labels(self):
        model = self.model([[1.0], [0.0], [-1.0]], [0.0] * 3, ["a", "b", "c"])
        assert len(predict_top_k(np.array([2.0]), model, k=5)) == 3

    def test_confidences_sum_to_one(self):
        rng = np.random.default_rng(0)
        model = self.model(rng.normal(size=(6, 4)), rng.normal(size=6),
                           [f"l{i}" for i in range(6)])
        result = predict_top_k(rng.normal(size=4), model, k=6)
        assert abs(sum(c for _, c in result) - 1.0) < 1e-12

    def test_dimension_mismatch(self):
        model = self.model([[1.0, 0.0]], [0.0], ["a"])
        with pytest.raises(errors.DimensionMismatch):
            predict_top_k(np.zeros(3), model)


class TestSharedCovariance:
    def test_hand_computed_cross(self):
        pts = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        cache = compute_shared_covariance(pts)
        assert np.allclose(cache.sigma, (2.0 / 3.0) * np.eye(2), atol=1e-12)

    def test_single_point_rejected(self):
        with pytest.raises(ValueError):
            compute_shared_covariance(np.zeros((1, 3)))

    def test_degenerate_corpus_with_explicit_regularization(self):
        pts = np.tile([2.0, -1.0, 0.5], (5, 1))
        cache = compute_shared_covariance(pts, regularization=1e-6)
        assert np.allclose(cache.sigma, 0.0, atol=1e-12)
        assert np.allclose(cache.sigma_inv, 1e6 * np.eye(3), rtol=1e-9)

    def test_degenerate_corpus_default_regularization_is_singular(self):
        pts = np.tile([2.0, -1.0, 0.5], (5, 1))
        with pytest.raises(errors.SingularAfterRegularization):
            compute_shared_covariance(pts)

    def test_inverse_identity_invariant(self):
        rng = np.random.default_rng(7)
        corpus = rng.normal(size=(40, 6)) @ rng.normal(size=(6, 6))
        cache = compute_shared_covariance(corpus)
        regularized = cache.sigma + cache.regularization * np.eye(6)
        gap = np.linalg.norm(regularized @ cache.sigma_inv - np.eye(6), 2)
        assert gap <= 1e-8


def one_class_model(dim):
    return ClassifierModel(("existing",), np.zeros((1, dim)), np.zeros(1),
                           "hist", dim)


class TestLdaExtendModel:
    def test_zero_mean_identity_case(self):
        # Identity covariance, zero mean, prior 1/2: w = 0, b = log 1/2.
        cache = CovarianceCache.identity(3)
        out = lda_extend_model(one_class_model(3), "new", np.zeros((4, 3)),
                               cache, CategoryPrior(np.array([0.5, 0.5])))
        assert np.array_equal(out.weights[1], np.zeros(3))
        assert abs(out.biases[1] - math.log(0.5)) < 1e-12

    def test_unit_mean_identity_case(self):
        # Identity covariance, mean (1, 0), prior 1/2: w = (1, 0),
        # b = log 1/2 - 1/2.
        cache = CovarianceCache.identity(2)
        train = np.tile([1.0, 0.0], (3, 1))
        out = lda_extend_model(one_class_model(2), "new", train, cache,
                               CategoryPrior(np.array([0.5, 0.5])))
        assert np.allclose(out.weights[1], [1.0, 0.0], atol=1e-15)
        assert abs(out.biases[1] - (math.log(0.5) - 0.5)) < 1e-12

    def test_existing_rows_bit_identical(self):
        rng = np.random.default_rng(2)
        base = ClassifierModel(("a", "b", "c"), rng.normal(size=(3, 5)),
                               rng.normal(size=3), "hist", 5)
        w_before = base.weights.tobytes()
        b_before = base.biases.tobytes()
        cache = compute_shared_covariance(rng.normal(size=(30, 5)))
        out = lda_extend_model(base, "d", rng.normal(size=(6, 5)), cache,
                               CategoryPrior.uniform(4))
        assert out.labels == ("a", "b", "c", "d")
        assert out.weights[:3].tobytes() == w_before
        assert out.biases[:3].tobytes() == b_before

    def test_duplicate_label(self):
        base = ClassifierModel(("a",), np.zeros((1, 2)), np.zeros(1), "hist", 2)
        with pytest.raises(errors.DuplicateLabel):
            lda_extend_model(base, "a", np.zeros((1, 2)),
                             CovarianceCache.identity(2), CategoryPrior.uniform(2))

    def test_dimension_mismatch(self):
        base = ClassifierModel.empty("hist", 4)
        with pytest.raises(errors.DimensionMismatch):
            lda_extend_model(base, "x", np.zeros((2, 3)),
                             CovarianceCache.identity(4), CategoryPrior.uniform(1))


def gaussian_bayes_argmax(x, means, sigma_inv, priors):
    """Brute-force shared-covariance Gaussian classifier (oracle)."""
    best, best_score = None, -math.inf
    for k, mu in enumerate(means):
        diff = x - mu
        score = math.log(priors[k]) - 0.5 * float(diff @ sigma_inv @ diff)
        if score > best_score:
            best, best_score = k, score
    return best


def build_by_extension(means, cache):
    """Grow a model one category at a time with uniform-at-that-step priors.

    Returns the model plus the prior each category's bias actually encodes
    (1 / (k + 1) for category k), which the Gaussian oracle must mirror.
    """
    model = ClassifierModel.empty("hist", means.shape[1])
    effective_priors = []
    for idx, mu in enumerate(means):
        model = lda_extend_model(model, f"c{idx}", mu[None, :], cache,
                                 CategoryPrior.uniform(idx + 1))
        effective_priors.append(1.0 / (idx + 1))
    return model, np.array(effective_priors)


class TestLdaGaussianEquivalence:
    def test_argmax_matches_brute_force(self):
        rng = np.random.default_rng(99)
        for _ in range(30):
            d = int(rng.integers(2, 9))
            k = int(rng.integers(2, 6))
            means = rng.normal(scale=2.0, size=(k, d))
            corpus = rng.normal(size=(5 * d, d))
            cache = compute_shared_covariance(corpus)
            model, priors = build_by_extension(means, cache)
            for _ in range(20):
                x = rng.normal(scale=3.0, size=d)
                scores = model.weights @ x + model.biases
                linear_pick = int(np.argmax(scores))
                oracle_pick = gaussian_bayes_argmax(x, means, cache.sigma_inv, priors)
                assert linear_pick == oracle_pick

    def test_feature_scaling_leaves_argmax_unchanged(self):
        # Scaling corpus and queries by c rescales the covariance by c^2 but
        # never moves the winning category.
        rng = np.random.default_rng(5)
        d, k, scale = 4, 3, 7.5
        means = rng.normal(size=(k, d))
        corpus = rng.normal(size=(40, d))
        base_cache = compute_shared_covariance(corpus, regularization=0.0)
        scaled_cache = compute_shared_covariance(corpus * scale, regularization=0.0)
        assert np.allclose(scaled_cache.sigma, scale ** 2 * base_cache.sigma,
                           rtol=1e-9)
        base_model, _ = build_by_extension(means, base_cache)
        scaled_model, _ = build_by_extension(means * scale, scaled_cache)
        for _ in range(25):
            x = rng.normal(size=d)
            base_pick = int(np.argmax(base_model.weights @ x + base_model.biases))
            scaled_pick = int(np.argmax(
                scaled_model.weights @ (x * scale) + scaled_model.biases))
            assert base_pick == scaled_pick

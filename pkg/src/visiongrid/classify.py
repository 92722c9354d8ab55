"""Classification, ten-crop feature extraction, and LDA category extension.

Feature extraction runs a pluggable backend over ten sub-images (four
corners, the center, and their horizontal mirrors), producing a ``(10, D)``
matrix per image.  Classification averages the ten rows and applies a
linear layer with softmax confidences.

New categories are appended to an existing model without touching its
weights: given the shared feature covariance ``S`` (computed once over a
reference corpus, inverse cached) and the mean ``mu`` of the new category's
training features,

    w_new = S^-1 mu
    b_new = log(prior) - mu^T S^-1 mu / 2

which is the linear classifier equivalent to a Gaussian model with one
covariance shared across categories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateImage,
    DimensionMismatch,
    DuplicateLabel,
    SingularAfterRegularization,
)
from .storage import CacheKey, params_digest

DEFAULT_CROP_RATIO = 0.875


# --------------------------------------------------------------------------
# feature backends
# --------------------------------------------------------------------------

class FeatureBackend:
    """Deterministic map from an image patch to a fixed-length vector.

    Subclasses set ``name``, ``dim`` and ``mirror_equivariant`` (whether
    extract commutes with horizontal mirroring) and implement
    :meth:`extract`.
    """

    name: str = "base"
    dim: int = 0
    mirror_equivariant: bool = False

    def extract(self, patch: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def config(self) -> dict:
        return {"name": self.name, "dim": self.dim}


class HistogramBackend(FeatureBackend):
    """Color + gradient-orientation histogram features.

    ``dim = 3 * color_bins + grad_bins``; the default (16, 16) gives the
    64-dimensional desk configuration.
    """

    def __init__(self, color_bins: int = 16, grad_bins: int = 16):
        self.color_bins = color_bins
        self.grad_bins = grad_bins
        self.dim = 3 * color_bins + grad_bins
        self.name = "hist"
        self.mirror_equivariant = False

    def extract(self, patch: np.ndarray) -> np.ndarray:
        rgb = as_rgb(patch).astype(np.float64)
        n_pixels = rgb.shape[0] * rgb.shape[1]
        parts = []
        for c in range(3):
            hist, _ = np.histogram(rgb[:, :, c], bins=self.color_bins,
                                   range=(0.0, 256.0))
            parts.append(hist / n_pixels)
        gray = rgb.mean(axis=2)
        gy, gx = np.gradient(gray)
        magnitude = np.hypot(gx, gy)
        orientation = np.arctan2(gy, gx)  # [-pi, pi]
        hist, _ = np.histogram(orientation, bins=self.grad_bins,
                               range=(-math.pi, math.pi), weights=magnitude)
        total = magnitude.sum()
        parts.append(hist / total if total > 0 else np.zeros(self.grad_bins))
        return np.concatenate(parts)

    def config(self) -> dict:
        return {"name": self.name, "color_bins": self.color_bins,
                "grad_bins": self.grad_bins}


BACKENDS = {
    "hist": HistogramBackend,
}


def make_backend(name: str, **kwargs) -> FeatureBackend:
    try:
        return BACKENDS[name](**kwargs)
    except KeyError:
        raise DimensionMismatch(f"no feature backend named {name!r}") from None


def as_rgb(image: np.ndarray) -> np.ndarray:
    """Coerce HxW or HxWxC arrays to HxWx3 uint8-range values."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] < 3:
        raise DegenerateImage(f"cannot interpret array of shape {arr.shape} as an image")
    return arr[:, :, :3]


# --------------------------------------------------------------------------
# ten-crop
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CropSet:
    """Ten patches in fixed order: TL, TR, BL, BR, C, then their mirrors."""

    patches: tuple
    side: int
    ratio: float
    offsets: tuple  # (x, y) of the five base crops

    def __len__(self):
        return 10


def ten_crop(image: np.ndarray, ratio: float = DEFAULT_CROP_RATIO) -> CropSet:
    """Cut the four corner crops, the center crop, and their mirrors.

    All patches are square with side ``floor(ratio * min(H, W))``; mirrors
    are column-reversed copies of the base crops.
    """
    arr = np.asarray(image)
    if arr.ndim < 2:
        raise DegenerateImage("image must be at least 2-D")
    h, w = arr.shape[:2]
    if h < 2 or w < 2:
        raise DegenerateImage(f"image {w}x{h} is too small to crop")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"crop ratio must be in (0, 1], got {ratio}")
    side = int(ratio * min(h, w))
    if side < 1:
        raise DegenerateImage(f"crop side would be {side}")
    offsets = (
        (0, 0),
        (w - side, 0),
        (0, h - side),
        (w - side, h - side),
        ((w - side) // 2, (h - side) // 2),
    )
    base = [arr[y:y + side, x:x + side].copy() for x, y in offsets]
    mirrored = [patch[:, ::-1].copy() for patch in base]
    return CropSet(tuple(base + mirrored), side, ratio, offsets)


def extract_features(image: np.ndarray, backend: FeatureBackend,
                     ratio: float = DEFAULT_CROP_RATIO) -> np.ndarray:
    """Per-crop features: row i is ``backend.extract`` of crop i, shape (10, D)."""
    crops = ten_crop(image, ratio)
    rows = np.empty((10, backend.dim))
    for i, patch in enumerate(crops.patches):
        vec = np.asarray(backend.extract(patch), dtype=np.float64)
        if vec.shape != (backend.dim,):
            raise DimensionMismatch(
                f"backend {backend.name!r} returned shape {vec.shape}, "
                f"expected ({backend.dim},)")
        if not np.all(np.isfinite(vec)):
            raise DimensionMismatch(f"backend {backend.name!r} returned non-finite values")
        rows[i] = vec
    return rows


def feature_cache_key(image_hash: str, backend: FeatureBackend,
                      ratio: float = DEFAULT_CROP_RATIO) -> CacheKey:
    digest = params_digest({"backend": backend.config(), "ratio": ratio})
    return CacheKey(image_hash, backend.name, digest)


def extract_features_cached(image: np.ndarray, backend: FeatureBackend,
                            cache, image_hash: str,
                            ratio: float = DEFAULT_CROP_RATIO):
    """Cache-backed :func:`extract_features`; returns ``(matrix, hit)``."""
    key = feature_cache_key(image_hash, backend, ratio)
    return cache.get_or_compute(key, lambda: extract_features(image, backend, ratio))


# --------------------------------------------------------------------------
# linear classifier
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierModel:
    """Linear classifier: scores = W x + b over backend features."""

    labels: tuple
    weights: np.ndarray  # (K, D)
    biases: np.ndarray   # (K,)
    backend: str
    dim: int

    def __post_init__(self):
        k = len(self.labels)
        if self.weights.shape != (k, self.dim) or self.biases.shape != (k,):
            raise DimensionMismatch(
                f"model shapes {self.weights.shape}/{self.biases.shape} do not "
                f"match {k} labels at dim {self.dim}")
        if k and not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise DimensionMismatch("model parameters must be finite")

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    @classmethod
    def empty(cls, backend: str, dim: int) -> "ClassifierModel":
        return cls((), np.zeros((0, dim)), np.zeros((0,)), backend, dim)


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    exps = np.exp(shifted)
    return exps / exps.sum()


def predict_top_k(features: np.ndarray, model: ClassifierModel, k: int = 5) -> list:
    """Top-k (label, confidence) from a (10, D) matrix or a single D-vector.

    Confidences are the softmax over all K scores; ties order by label.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 2:
        x = x.mean(axis=0)
    if x.shape != (model.dim,):
        raise DimensionMismatch(
            f"feature dim {x.shape} does not match model dim {model.dim}")
    if model.num_labels == 0:
        return []
    scores = model.weights @ x + model.biases
    confidences = softmax(scores)
    order = sorted(range(model.num_labels),
                   key=lambda i: (-confidences[i], model.labels[i]))
    return [(model.labels[i], float(confidences[i])) for i in order[:k]]


def classify_top_k(image: np.ndarray, model: ClassifierModel,
                   backend: FeatureBackend, k: int = 5,
                   ratio: float = DEFAULT_CROP_RATIO,
                   cache=None, image_hash: str | None = None) -> list:
    """Classify one image; features are pulled through the cache when given."""
    if backend.name != model.backend or backend.dim != model.dim:
        raise DimensionMismatch(
            f"backend {backend.name}/{backend.dim} does not match model "
            f"{model.backend}/{model.dim}")
    if cache is not None and image_hash is not None:
        features, _ = extract_features_cached(image, backend, cache, image_hash, ratio)
    else:
        features = extract_features(image, backend, ratio)
    return predict_top_k(features, model, k)


# --------------------------------------------------------------------------
# shared covariance + category extension
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CovarianceCache:
    """Shared feature covariance and its cached (regularized) inverse."""

    sigma: np.ndarray
    sigma_inv: np.ndarray
    regularization: float
    corpus_size: int

    def __post_init__(self):
        d = self.sigma.shape[0]
        if self.sigma.shape != (d, d) or self.sigma_inv.shape != (d, d):
            raise DimensionMismatch("covariance matrices must be square and matching")

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "CovarianceCache":
        eye = np.eye(dim)
        return cls(eye, eye.copy(), 0.0, 0)


def compute_shared_covariance(corpus: np.ndarray,
                              regularization: float | None = None) -> CovarianceCache:
    """Unbiased covariance of corpus rows plus a verified cached inverse.

    Parameters
    ----------
    corpus : (n, D) array, n >= 2.
    regularization : ridge added to the diagonal before inversion; defaults
        to ``1e-6 * trace(S) / D``.

    Raises ``SingularAfterRegularization`` when the regularized matrix still
    fails the inverse identity check at 1e-8 spectral tolerance.
    """
    x = np.asarray(corpus, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("corpus must be (n, D) with n >= 2")
    n, d = x.shape
    centered = x - x.mean(axis=0)
    sigma = centered.T @ centered / (n - 1)
    sigma = (sigma + sigma.T) / 2.0
    if regularization is None:
        regularization = 1e-6 * float(np.trace(sigma)) / d
    regularized = sigma + regularization * np.eye(d)
    try:
        sigma_inv = np.linalg.inv(regularized)
    except np.linalg.LinAlgError as exc:
        raise SingularAfterRegularization(str(exc)) from None
    identity_gap = np.linalg.norm(regularized @ sigma_inv - np.eye(d), 2)
    if not np.isfinite(identity_gap) or identity_gap > 1e-8:
        raise SingularAfterRegularization(
            f"inverse identity check failed: spectral gap {identity_gap:.3e}")
    return CovarianceCache(sigma, sigma_inv, regularization, n)


@dataclass(frozen=True)
class CategoryPrior:
    """Per-category prior probabilities; defaults to uniform."""

    probabilities: np.ndarray

    def __post_init__(self):
        p = self.probabilities
        if np.any(p <= 0) or abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValueError("priors must be positive and sum to 1")

    @classmethod
    def uniform(cls, k: int) -> "CategoryPrior":
        return cls(np.full(k, 1.0 / k))


def lda_extend_model(model: ClassifierModel, new_label: str,
                     training_features: np.ndarray, cache: CovarianceCache,
                     priors: CategoryPrior) -> ClassifierModel:
    """Append one category to a model without retraining the others.

    Runs in O(n D + D^2) given the cached inverse; every pre-existing row of
    W and entry of b is carried over bit-identical.
    """
    if new_label in model.labels:
        raise DuplicateLabel(new_label)
    train = np.asarray(training_features, dtype=np.float64)
    if train.ndim == 1:
        train = train[None, :]
    if train.shape[0] < 1 or train.shape[1] != model.dim:
        raise DimensionMismatch(
            f"training features {train.shape} do not match model dim {model.dim}")
    if cache.dim != model.dim:
        raise DimensionMismatch(
            f"covariance dim {cache.dim} does not match model dim {model.dim}")
    k_new = model.num_labels + 1
    if priors.probabilities.shape != (k_new,):
        raise DimensionMismatch(
            f"priors must cover {k_new} categories, got {priors.probabilities.shape}")

    mu = train.mean(axis=0)
    w_new = cache.sigma_inv @ mu
    b_new = math.log(float(priors.probabilities[-1])) - 0.5 * float(mu @ cache.sigma_inv @ mu)

    weights = np.vstack([model.weights, w_new[None, :]])
    biases = np.concatenate([model.biases, [b_new]])
    return ClassifierModel(model.labels + (new_label,), weights, biases,
                           model.backend, model.dim)

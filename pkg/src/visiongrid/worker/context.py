"""Shared execution context for functionality handlers.

Bundles the storage root, feature cache, feature backend, classifier model
and VIP regressor a worker node uses.  The demo classifier is built from
synthetic color-texture classes through the category-extension path and
persisted in the model namespace, so every worker sharing a storage root
loads the same bytes.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .. import matcontainer
from ..classify import (
    CategoryPrior,
    ClassifierModel,
    FeatureBackend,
    HistogramBackend,
    compute_shared_covariance,
    extract_features,
    lda_extend_model,
)
from ..errors import FetchFailure, NotFound
from ..storage import FeatureCache, ObjectStore, SchemeResolver
from ..vip import PairRegressor, default_regressor

logger = logging.getLogger(__name__)

# Color prototypes for the bundled demo classifier.
DEMO_CLASSES = {
    "brick": (150, 70, 50),
    "foliage": (60, 120, 50),
    "sand": (210, 190, 140),
    "sky": (120, 180, 235),
    "snow": (243, 246, 250),
    "water": (30, 90, 160),
}


def decode_image(data: bytes) -> np.ndarray:
    """Decode image bytes to an RGB uint8 array."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            return np.asarray(img.convert("RGB"))
    except Exception as exc:  # noqa: BLE001 - PIL raises a menagerie
        raise FetchFailure(f"cannot decode image: {exc}") from exc


def encode_png(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(buffer, format="PNG")
    return buffer.getvalue()


def demo_training_patch(rng, color, size=48):
    """Noisy patch around a prototype color with a soft gradient."""
    base = np.asarray(color, dtype=np.float64)
    patch = np.tile(base, (size, size, 1))
    gradient = np.linspace(-12, 12, size)[:, None, None]
    noise = rng.normal(0, 14, size=(size, size, 3))
    return np.clip(patch + gradient + noise, 0, 255).astype(np.uint8)


def build_demo_model(backend: FeatureBackend, ratio: float = 0.875,
                     samples_per_class: int = 20, seed: int = 424242) -> ClassifierModel:
    """Train the bundled classifier via shared-covariance category extension.

    Deterministic: the same backend and seed always produce byte-identical
    model parameters.
    """
    rng = np.random.default_rng(seed)
    labels = sorted(DEMO_CLASSES)
    per_class_features = {}
    corpus_rows = []
    for label in labels:
        rows = []
        for _ in range(samples_per_class):
            patch = demo_training_patch(rng, DEMO_CLASSES[label])
            rows.append(extract_features(patch, backend, ratio).mean(axis=0))
        per_class_features[label] = np.asarray(rows)
        corpus_rows.append(per_class_features[label])
    corpus = np.vstack(corpus_rows)
    cache = compute_shared_covariance(corpus)

    model = ClassifierModel.empty(backend.name, backend.dim)
    for i, label in enumerate(labels):
        model = lda_extend_model(model, label, per_class_features[label],
                                 cache, CategoryPrior.uniform(i + 1))
    return model


@dataclass
class WorkerContext:
    storage: ObjectStore
    resolver: SchemeResolver
    cache: FeatureCache
    backend: FeatureBackend
    regressor: PairRegressor
    crop_ratio: float = 0.875
    engine_workers: int = 4
    stitch_seed: int = 7
    backends: dict = field(default_factory=dict)
    _model: ClassifierModel | None = field(default=None, repr=False)

    def __post_init__(self):
        self.backends.setdefault(self.backend.name, self.backend)

    def backend_for(self, params: dict) -> FeatureBackend:
        """Backend named by a task's params, defaulting to the node's own."""
        name = params.get("name")
        if name is None:
            return self.backend
        try:
            return self.backends[name]
        except KeyError:
            available = ", ".join(sorted(self.backends))
            raise FetchFailure(
                f"no feature backend named {name!r} (available: {available})"
            ) from None

    @property
    def model(self) -> ClassifierModel:
        if self._model is None:
            self._model = self._load_or_build_model()
        return self._model

    def _model_key(self) -> str:
        return f"demo-{self.backend.name}-{self.backend.dim}.ccvm"

    def _load_or_build_model(self) -> ClassifierModel:
        key = self._model_key()
        try:
            labels, weights, biases = matcontainer.read_model(
                self.storage.fetch("models", key))
            return ClassifierModel(tuple(labels), weights, biases,
                                   self.backend.name, self.backend.dim)
        except (NotFound, ValueError):
            pass
        logger.info("building demo classifier model (%s)", key)
        model = build_demo_model(self.backend, self.crop_ratio)
        self.storage.store(
            "models",
            matcontainer.write_model(list(model.labels), model.weights,
                                     model.biases),
            key=key)
        return model

    def fetch_image(self, ref) -> np.ndarray:
        if not ref.content_hash:
            raise FetchFailure(f"image ref {ref.path!r} was never ingested")
        try:
            data = self.storage.fetch("images", ref.content_hash)
        except NotFound as exc:
            raise FetchFailure(
                f"image {ref.content_hash[:12]} missing from storage") from exc
        return decode_image(data)


def default_context(storage_root, dropbox_root=None, engine_workers: int = 4) -> WorkerContext:
    storage = ObjectStore(storage_root)
    resolver = SchemeResolver(dropbox_root or (storage.root / "dropbox"))
    return WorkerContext(
        storage=storage,
        resolver=resolver,
        cache=FeatureCache(storage),
        backend=HistogramBackend(),
        regressor=default_regressor(),
        engine_workers=engine_workers,
    )

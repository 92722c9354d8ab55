import io

import numpy as np
import pytest
from PIL import Image

from visiongrid.storage import ObjectStore


def array_to_png(array: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(buffer, format="PNG")
    return buffer.getvalue()


def color_noise_image(color, h=72, w=96, seed=0, noise=12):
    rng = np.random.default_rng(seed)
    base = np.tile(np.asarray(color, dtype=np.float64), (h, w, 1))
    return np.clip(base + rng.normal(0, noise, (h, w, 3)), 0, 255).astype(np.uint8)


def textured_scene(h, w, seed=0, blobs=160):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 40, size=(h, w, 3), dtype=np.uint8).astype(np.int32)
    for _ in range(blobs):
        bw = int(rng.integers(6, 24))
        bh = int(rng.integers(6, 24))
        x = int(rng.integers(0, w - bw))
        y = int(rng.integers(0, h - bh))
        img[y:y + bh, x:x + bw] = rng.integers(60, 255, size=3)
    return img.astype(np.uint8)


def ingest_png(store: ObjectStore, array: np.ndarray) -> str:
    return store.store("images", array_to_png(array))


@pytest.fixture
def storage_root(tmp_path):
    return tmp_path / "shared-storage"

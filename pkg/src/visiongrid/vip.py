"""Importance ranking of people in group photos.

For every ordered pair of detected faces a 6-dimensional relative
configuration vector is scored by a linear pairwise regressor; a face's
importance is the mean of its outgoing pair scores and faces are ranked by
that aggregate.

Pair feature layout (a relative to b):

    0  log area ratio            antisymmetric
    1  center distance / diag    symmetric
    2  horizontal offset / W     antisymmetric
    3  vertical offset / H       antisymmetric
    4  IoU                       symmetric
    5  centrality difference     antisymmetric

Every component is invariant under uniform image rescaling, so a ranking
never depends on resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NoFaces

PAIR_FEATURE_DIM = 6
ANTISYMMETRIC_FEATURES = (0, 2, 3, 5)
SYMMETRIC_FEATURES = (1, 4)


@dataclass(frozen=True)
class FaceBox:
    x: float
    y: float
    w: float
    h: float
    index: int = 0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"degenerate face box {self.w}x{self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h,
                "index": self.index}


def _clamp_box(x, y, w, h, width, height):
    x0 = min(max(x, 0.0), width)
    y0 = min(max(y, 0.0), height)
    x1 = min(max(x + w, 0.0), width)
    y1 = min(max(y + h, 0.0), height)
    return x0, y0, x1 - x0, y1 - y0


def detect_faces(image: np.ndarray, mode="builtin") -> list:
    """Detect faces, or clamp and index caller-provided boxes.

    ``mode`` is either the string ``"builtin"`` or a list of ``(x, y, w, h)``
    tuples.  The builtin detector is a deterministic sliding-window stub
    scoring skin-tone fraction times local contrast; it exists so the
    pipeline runs end-to-end without an external detector.
    """
    arr = np.asarray(image)
    if arr.ndim not in (2, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise NoFaces(f"input of shape {arr.shape} is not an image")
    height, width = arr.shape[:2]

    if mode != "builtin":
        boxes = []
        for x, y, w, h in mode:
            cx, cy, cw, ch = _clamp_box(float(x), float(y), float(w), float(h),
                                        width, height)
            if cw > 0 and ch > 0:
                boxes.append(FaceBox(cx, cy, cw, ch, index=len(boxes)))
        return boxes
    return _builtin_detect(arr, width, height)


def _builtin_detect(arr: np.ndarray, width: int, height: int) -> list:
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=2)
    rgb = arr[:, :, :3].astype(np.float64)
    r, g, b = rgb[:, :, 0], rgb[:, :, 1], rgb[:, :, 2]
    spread = rgb.max(axis=2) - rgb.min(axis=2)
    skin = ((r > 95) & (g > 40) & (b > 20) & (spread > 15)
            & (r > g) & (r > b)).astype(np.float64)
    gray = rgb.mean(axis=2)

    # Integral images make window sums O(1).
    skin_int = np.pad(skin.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    gray_int = np.pad(gray.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    gray2_int = np.pad((gray ** 2).cumsum(0).cumsum(1), ((1, 0), (1, 0)))

    def window_sum(integral, x, y, side):
        return (integral[y + side, x + side] - integral[y, x + side]
                - integral[y + side, x] + integral[y, x])

    candidates = []
    base = min(width, height)
    for scale in (0.5, 0.35, 0.25, 0.15):
        side = int(base * scale)
        if side < 8:
            continue
        step = max(2, side // 4)
        area = side * side
        for y in range(0, height - side + 1, step):
            for x in range(0, width - side + 1, step):
                skin_frac = window_sum(skin_int, x, y, side) / area
                if skin_frac < 0.3:
                    continue
                mean = window_sum(gray_int, x, y, side) / area
                var = max(window_sum(gray2_int, x, y, side) / area - mean ** 2, 0.0)
                score = skin_frac * math.sqrt(var + 1.0)
                candidates.append((score, x, y, side))

    candidates.sort(key=lambda c: (-c[0], c[2], c[1], c[3]))
    boxes: list = []
    for score, x, y, side in candidates:
        if len(boxes) >= 10:
            break
        box = FaceBox(float(x), float(y), float(side), float(side), index=len(boxes))
        if all(_iou(box, kept) < 0.3 for kept in boxes):
            boxes.append(box)
    return boxes


def _iou(a: FaceBox, b: FaceBox) -> float:
    x0 = max(a.x, b.x)
    y0 = max(a.y, b.y)
    x1 = min(a.x + a.w, b.x + b.w)
    y1 = min(a.y + a.h, b.y + b.h)
    inter = max(x1 - x0, 0.0) * max(y1 - y0, 0.0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def pairwise_features(a: FaceBox, b: FaceBox, width: float, height: float) -> np.ndarray:
    """Relative configuration of face ``a`` with respect to face ``b``."""
    diag = math.hypot(width, height)
    ca, cb = a.center, b.center
    image_center = (width / 2.0, height / 2.0)
    dist_a = math.hypot(ca[0] - image_center[0], ca[1] - image_center[1])
    dist_b = math.hypot(cb[0] - image_center[0], cb[1] - image_center[1])
    return np.array([
        math.log(a.area / b.area),
        math.hypot(ca[0] - cb[0], ca[1] - cb[1]) / diag,
        (ca[0] - cb[0]) / width,
        (ca[1] - cb[1]) / height,
        _iou(a, b),
        (dist_a - dist_b) / diag,
    ])


@dataclass(frozen=True)
class PairRegressor:
    """Linear scorer over pair features; positive means "a outranks b"."""

    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        if self.weights.shape != (PAIR_FEATURE_DIM,):
            raise ValueError(f"regressor needs {PAIR_FEATURE_DIM} weights")

    def score(self, features: np.ndarray) -> float:
        return float(self.weights @ features + self.bias)


@dataclass(frozen=True)
class ImportanceRanking:
    """Faces sorted by aggregate score, descending; ties by face index."""

    entries: tuple  # ((face_index, score), ...)

    def ordered_indices(self) -> list:
        return [i for i, _ in self.entries]

    def score_of(self, face_index: int) -> float:
        for i, s in self.entries:
            if i == face_index:
                return s
        raise KeyError(face_index)


def score_and_rank(boxes: list, regressor: PairRegressor,
                   width: float, height: float) -> ImportanceRanking:
    """Aggregate pairwise scores into a total importance order.

    A face's score is the mean of its outgoing pair scores; a lone face
    scores 0; the empty input yields an empty ranking.
    """
    n = len(boxes)
    if n == 0:
        return ImportanceRanking(())
    # Canonical index order keeps float accumulation (hence scores) exactly
    # independent of the input permutation.
    ordered = sorted(boxes, key=lambda box: box.index)
    scores = {box.index: 0.0 for box in ordered}
    if n > 1:
        for a in ordered:
            total = 0.0
            for b in ordered:
                if a.index == b.index:
                    continue
                total += regressor.score(pairwise_features(a, b, width, height))
            scores[a.index] = total / (n - 1)
    entries = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return ImportanceRanking(tuple(entries))


# --------------------------------------------------------------------------
# default regressor fixture
# --------------------------------------------------------------------------

def synthetic_pair_corpus(seed: int = 1234, samples: int = 4000):
    """Generate (features, target) pairs from a simple importance model.

    Ground-truth importance of a face is ``log(area) - 0.8 * centrality``
    plus noise; the target for a pair is the importance difference.  The
    corpus exists to fit the default regressor reproducibly, not to model
    any real photographic corpus.
    """
    rng = np.random.default_rng(seed)
    features = np.empty((samples, PAIR_FEATURE_DIM))
    targets = np.empty(samples)
    for i in range(samples):
        width, height = rng.uniform(320, 1280, size=2)
        boxes = []
        for _ in range(2):
            side = rng.uniform(0.05, 0.4) * min(width, height)
            x = rng.uniform(0, width - side)
            y = rng.uniform(0, height - side)
            boxes.append(FaceBox(x, y, side, side))
        diag = math.hypot(width, height)
        center = (width / 2, height / 2)

        def importance(box):
            dist = math.hypot(box.center[0] - center[0], box.center[1] - center[1])
            return math.log(box.area / (width * height)) - 0.8 * (dist / diag)

        features[i] = pairwise_features(boxes[0], boxes[1], width, height)
        targets[i] = (importance(boxes[0]) - importance(boxes[1])
                      + rng.normal(0, 0.05))
    return features, targets


def train_regressor(features: np.ndarray, targets: np.ndarray) -> PairRegressor:
    """Least-squares fit of the linear pair scorer (no intercept column)."""
    weights, *_ = np.linalg.lstsq(features, targets, rcond=None)
    return PairRegressor(weights, 0.0)


_DEFAULT_REGRESSOR: PairRegressor | None = None


def default_regressor() -> PairRegressor:
    """Regressor fit on the bundled synthetic corpus (deterministic)."""
    global _DEFAULT_REGRESSOR
    if _DEFAULT_REGRESSOR is None:
        _DEFAULT_REGRESSOR = train_regressor(*synthetic_pair_corpus())
    return _DEFAULT_REGRESSOR

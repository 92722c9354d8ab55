"""Panorama stitching on the graph engine.

Four stages over a data graph whose vertices are images and whose edges
connect overlapping pairs:

1. keypoint detection        -- vertex-parallel (Harris corners + patch
   descriptors)
2. pairwise matching         -- edge-parallel over candidate pairs (ratio
   test + RANSAC transform fit)
3. global camera refinement  -- message passing: each vertex repeatedly
   re-solves its camera against its neighbors' estimates, one anchor held
   fixed to pin the gauge
4. seam + feather compositing -- edge-parallel seam stats, then weighted
   accumulation onto the output canvas

Cameras map image coordinates into the shared canvas frame.  For an edge
(i, j) the fitted transform T_ij maps i-coordinates into j-coordinates, so
consistent placements satisfy ``place_i = place_j . T_ij``; refinement
minimizes the squared parameter mismatch of that relation over all edges.
The per-vertex exact re-solve never increases the objective: the update is
a simultaneous block minimization whose increase term is bounded by the
signless counterpart of the edge quadratic, a sum of squares.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import CanvasOverflow, DegenerateImage
from .graph import (
    DataGraph,
    ExecutionReport,
    VertexProgram,
    run_edge_parallel,
    run_message_passing,
    run_vertex_parallel,
)

TRANSLATION = "translation"
AFFINE = "affine"

DEFAULT_MAX_KEYPOINTS = 500
DESCRIPTOR_SIDE = 8
RATIO_THRESHOLD = 0.8
RANSAC_ITERATIONS = 500
INLIER_PIXELS = 2.0
MIN_INLIERS = 8
DEFAULT_SEED = 7
MAX_CANVAS_PIXELS = 100_000_000


def motion_model_from_warp(value: str | None) -> str:
    """Map the job-level ``warp`` parameter onto a motion model."""
    if value is None or value == TRANSLATION:
        return TRANSLATION
    if value in ("plane", AFFINE):
        return AFFINE
    raise ValueError(f"unknown warp {value!r}")


def identity_camera(model: str) -> np.ndarray:
    if model == TRANSLATION:
        return np.zeros(2)
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def _to_h(camera: np.ndarray) -> np.ndarray:
    """Lift a (2,) translation or (2,3) affine to a 3x3 homogeneous matrix."""
    h = np.eye(3)
    if camera.shape == (2,):
        h[:2, 2] = camera
    else:
        h[:2, :] = camera
    return h


def transform_points(transform: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(points)
    if transform.shape == (2,):
        return pts + transform
    return pts @ transform[:, :2].T + transform[:, 2]


def invert_transform(transform: np.ndarray) -> np.ndarray:
    if transform.shape == (2,):
        return -transform
    a = transform[:, :2]
    a_inv = np.linalg.inv(a)
    return np.hstack([a_inv, (-a_inv @ transform[:, 2])[:, None]])


def compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Transform equal to applying ``inner`` first, then ``outer``."""
    h = _to_h(outer) @ _to_h(inner)
    if outer.shape == (2,) and inner.shape == (2,):
        return h[:2, 2]
    return h[:2, :]


@dataclass(frozen=True)
class StitchVertex:
    key: str
    image: np.ndarray
    keypoints: np.ndarray    # (N, 2) x,y
    descriptors: np.ndarray  # (N, 64)
    camera: np.ndarray

    def with_camera(self, camera: np.ndarray) -> "StitchVertex":
        return replace(self, camera=camera)


@dataclass(frozen=True)
class StitchEdge:
    """Relative transform between an overlapping image pair.

    ``transform`` maps ``source``-frame coordinates into ``target``-frame
    coordinates; matches are (source keypoint idx, target keypoint idx).
    """

    source: str
    target: str
    transform: np.ndarray
    matches: tuple
    inliers: int

    def prediction_for(self, vertex: str, other_camera: np.ndarray) -> np.ndarray:
        """Camera estimate for ``vertex`` given the other endpoint's camera."""
        if vertex == self.source:
            # place_source = place_target . T
            return compose(other_camera, self.transform)
        return compose(other_camera, invert_transform(self.transform))

    def frame_transform(self, vertex: str) -> np.ndarray:
        """Transform composed on the right of ``vertex``'s prediction source."""
        return self.transform if vertex == self.source else invert_transform(self.transform)


# --------------------------------------------------------------------------
# stage 1: keypoints
# --------------------------------------------------------------------------

def to_gray(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, :, :3].mean(axis=2)
    if arr.ndim != 2:
        raise DegenerateImage(f"cannot grayscale shape {np.asarray(image).shape}")
    return arr / 255.0


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    """Separable box filter via padded cumulative sums."""
    size = 2 * radius + 1
    padded = np.pad(img, radius, mode="edge")
    c = padded.cumsum(axis=0)
    c = np.vstack([np.zeros((1, c.shape[1])), c])
    rows = (c[size:, :] - c[:-size, :]) / size
    c = rows.cumsum(axis=1)
    c = np.hstack([np.zeros((c.shape[0], 1)), c])
    return (c[:, size:] - c[:, :-size]) / size


def detect_keypoints(image: np.ndarray,
                     max_keypoints: int = DEFAULT_MAX_KEYPOINTS):
    """Harris corners with normalized patch descriptors.

    Returns ``(points, descriptors)`` where points is (N, 2) float ``x, y``
    and descriptors is (N, 64).  Detection is deterministic: candidates are
    local maxima of the corner response above 1% of its peak, ranked by
    response with (y, x) tie-breaking.
    """
    gray = to_gray(image)
    h, w = gray.shape
    if h < DESCRIPTOR_SIDE + 2 or w < DESCRIPTOR_SIDE + 2:
        raise DegenerateImage(f"image {w}x{h} too small for keypoints")

    gy, gx = np.gradient(gray)
    ixx = _box_blur(gx * gx, 1)
    iyy = _box_blur(gy * gy, 1)
    ixy = _box_blur(gx * gy, 1)
    response = ixx * iyy - ixy * ixy - 0.05 * (ixx + iyy) ** 2

    margin = DESCRIPTOR_SIDE // 2 + 1
    mask = np.zeros_like(response, dtype=bool)
    mask[margin:h - margin, margin:w - margin] = True
    peak = response[mask].max(initial=0.0)
    if peak <= 0:
        empty = np.empty((0, 2)), np.empty((0, DESCRIPTOR_SIDE ** 2))
        return empty

    # Non-max suppression over the 8-neighborhood.  Ties on flat response
    # plateaus are broken toward the scan-order-first pixel so each plateau
    # yields exactly one keypoint.
    is_max = np.ones_like(mask)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            shifted = np.roll(np.roll(response, dy, axis=0), dx, axis=1)
            neighbor_is_earlier = dy > 0 or (dy == 0 and dx > 0)
            if neighbor_is_earlier:
                is_max &= response > shifted
            else:
                is_max &= response >= shifted
    keep = mask & is_max & (response > 0.01 * peak)
    ys, xs = np.nonzero(keep)
    order = np.lexsort((xs, ys, -response[ys, xs]))[:max_keypoints]
    ys, xs = ys[order], xs[order]

    descriptors = np.empty((len(ys), DESCRIPTOR_SIDE ** 2))
    half = DESCRIPTOR_SIDE // 2
    for i, (y, x) in enumerate(zip(ys, xs)):
        patch = gray[y - half + 1:y + half + 1, x - half + 1:x + half + 1].ravel()
        patch = patch - patch.mean()
        norm = np.linalg.norm(patch)
        descriptors[i] = patch / norm if norm > 1e-12 else patch
    points = np.stack([xs.astype(np.float64), ys.astype(np.float64)], axis=1)
    return points, descriptors


# --------------------------------------------------------------------------
# stage 2: pairwise matching
# --------------------------------------------------------------------------

def _ratio_matches(desc_a: np.ndarray, desc_b: np.ndarray) -> list:
    """Nearest-neighbor matches passing the distance-ratio test."""
    if len(desc_a) == 0 or len(desc_b) < 2:
        return []
    # Descriptors are unit-norm: ||a-b||^2 = 2 - 2 a.b
    similarity = desc_a @ desc_b.T
    dist2 = np.maximum(2.0 - 2.0 * similarity, 0.0)
    nearest = np.argsort(dist2, axis=1)[:, :2]
    matches = []
    for ia in range(len(desc_a)):
        ib, ib2 = nearest[ia]
        d1, d2 = math.sqrt(dist2[ia, ib]), math.sqrt(dist2[ia, ib2])
        if d1 <= RATIO_THRESHOLD * d2:
            matches.append((ia, int(ib)))
    return matches


def _fit_translation(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return (dst - src).mean(axis=0)


def _fit_affine(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    n = len(src)
    a = np.zeros((2 * n, 6))
    a[0::2, 0:2] = src
    a[0::2, 2] = 1.0
    a[1::2, 3:5] = src
    a[1::2, 5] = 1.0
    rhs = dst.reshape(-1)
    solution, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    transform = solution.reshape(2, 3)
    if abs(np.linalg.det(transform[:, :2])) < 1e-6:
        return None
    return transform


def match_pair(a: StitchVertex, b: StitchVertex, model: str = TRANSLATION,
               min_inliers: int = MIN_INLIERS,
               iterations: int = RANSAC_ITERATIONS,
               inlier_pixels: float = INLIER_PIXELS,
               seed: int = DEFAULT_SEED) -> StitchEdge | None:
    """Estimate the relative transform a -> b, or None without overlap.

    Ratio-test matches feed a seeded RANSAC; the winning consensus set is
    refit by least squares and kept only if it still clears ``min_inliers``.
    """
    matches = _ratio_matches(a.descriptors, b.descriptors)
    sample_size = 1 if model == TRANSLATION else 3
    if len(matches) < max(min_inliers, sample_size):
        return None
    src = a.keypoints[[m[0] for m in matches]]
    dst = b.keypoints[[m[1] for m in matches]]

    # Per-pair deterministic stream so edge results do not depend on
    # evaluation order.
    pair_seed = (seed * 1_000_003 + zlib.crc32(f"{a.key}|{b.key}".encode())) % (2 ** 32)
    rng = np.random.default_rng(pair_seed)

    best_inliers: np.ndarray | None = None
    best_count = 0
    for _ in range(iterations):
        pick = rng.choice(len(matches), size=sample_size, replace=False)
        if model == TRANSLATION:
            candidate = _fit_translation(src[pick], dst[pick])
        else:
            candidate = _fit_affine(src[pick], dst[pick])
            if candidate is None:
                continue
        err = np.linalg.norm(transform_points(candidate, src) - dst, axis=1)
        inliers = err <= inlier_pixels
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers

    if best_inliers is None or best_count < min_inliers:
        return None
    if model == TRANSLATION:
        transform = _fit_translation(src[best_inliers], dst[best_inliers])
    else:
        transform = _fit_affine(src[best_inliers], dst[best_inliers])
        if transform is None:
            return None
    err = np.linalg.norm(transform_points(transform, src) - dst, axis=1)
    final = err <= inlier_pixels
    if int(final.sum()) < min_inliers:
        return None
    kept = tuple(m for m, ok in zip(matches, final) if ok)
    return StitchEdge(a.key, b.key, transform, kept, int(final.sum()))


# --------------------------------------------------------------------------
# pipeline assembly
# --------------------------------------------------------------------------

def build_stitch_graph(images: dict, model: str = TRANSLATION,
                       workers: int | None = None, seed: int = DEFAULT_SEED,
                       on_progress=None) -> DataGraph:
    """Stages 1-2: detect keypoints per image, match all candidate pairs.

    ``images`` maps keys to arrays.  Returns a graph whose surviving edges
    carry :class:`StitchEdge` payloads; unmatched pairs are dropped.
    """
    vertices = {
        key: StitchVertex(key, np.asarray(img), np.empty((0, 2)),
                          np.empty((0, DESCRIPTOR_SIDE ** 2)),
                          identity_camera(model))
        for key, img in images.items()
    }
    bare = DataGraph(vertices)

    def detect(_key, vertex):
        points, descriptors = detect_keypoints(vertex.image)
        result = replace(vertex, keypoints=points, descriptors=descriptors)
        if on_progress is not None:
            on_progress("keypoints", vertex.key, len(points))
        return result

    detected = run_vertex_parallel(bare, detect, workers=workers)

    keys = sorted(detected.vertices)
    candidates = DataGraph(detected.vertices,
                           [(a, b, None) for i, a in enumerate(keys)
                            for b in keys[i + 1:]])

    def match(a, b, _payload, va, vb):
        edge = match_pair(va, vb, model=model, seed=seed)
        if on_progress is not None:
            on_progress("match", f"{a}|{b}", edge.inliers if edge else 0)
        return edge

    matched = run_edge_parallel(candidates, match, workers=workers)
    surviving = [(a, b, e) for (a, b), e in matched.edges.items() if e is not None]
    return DataGraph(detected.vertices, surviving)


@dataclass(frozen=True)
class RefinementReport:
    engine: ExecutionReport
    objective_trace: tuple

    def to_dict(self) -> dict:
        return {"engine": self.engine.to_dict(),
                "objective_trace": list(self.objective_trace)}


def alignment_objective(graph: DataGraph) -> float:
    """Sum over edges of the squared camera-consistency mismatch."""
    total = 0.0
    for edge in graph.edges.values():
        cam_s = graph.vertices[edge.source].camera
        predicted = edge.prediction_for(edge.source,
                                        graph.vertices[edge.target].camera)
        total += float(np.sum((cam_s - predicted) ** 2))
    return total


def refine_cameras(graph: DataGraph, anchor: str, epsilon: float = 1e-12,
                   max_rounds: int = 10_000, workers: int | None = None):
    """Globally refine cameras by message passing; the anchor stays fixed.

    Each round every vertex re-solves its camera to best agree with its
    neighbors' previous-round cameras through the measured edge transforms
    (mean for translations, a 3x3 normal solve for affine).  The residual is
    the parameter change norm.  Returns ``(refined graph, RefinementReport)``.
    """
    if anchor not in graph.vertices:
        raise KeyError(f"anchor {anchor!r} not in graph")
    graph.require_connected()

    def gather(v, vertex, neighbors, incident):
        edge_by_other = dict(incident)
        return [(other_payload.camera, edge_by_other[u]) for u, other_payload in neighbors]

    def apply(v, vertex, predictions):
        if v == anchor or not predictions:
            return vertex, 0.0
        cam = vertex.camera
        if cam.shape == (2,):
            new_cam = np.mean(
                [edge.prediction_for(v, other_cam) for other_cam, edge in predictions],
                axis=0)
        else:
            # Exact local minimizer of the incident edge terms.  Where v is
            # the edge source the term is ||P_v - P_u T~||^2; where v is the
            # target it is ||P_u - P_v T~||^2.  Stationarity in both cases
            # accumulates into P_v A = R with A = sum M M^T over the right
            # factors M of P_v.
            a = np.zeros((3, 3))
            rhs = np.zeros((2, 3))
            for other_cam, edge in predictions:
                if v == edge.source:
                    a += np.eye(3)
                    rhs += compose(other_cam, edge.transform)
                else:
                    m = _to_h(edge.transform)
                    a += m @ m.T
                    rhs += other_cam @ m.T
            new_cam = np.linalg.solve(a.T, rhs.T).T
        residual = float(np.linalg.norm(new_cam - cam))
        return vertex.with_camera(new_cam), residual

    program = VertexProgram(gather=gather, apply=apply, epsilon=epsilon)
    objective_trace = [alignment_objective(graph)]

    def record(_round_index, payloads):
        objective_trace.append(alignment_objective(graph.with_vertices(payloads)))

    refined, report = run_message_passing(graph, program, max_rounds,
                                          workers=workers, on_round=record)
    return refined, RefinementReport(report, tuple(objective_trace))


# --------------------------------------------------------------------------
# stage 4: seams + compositing
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Panorama:
    pixels: np.ndarray       # (H, W, 3) uint8
    blended: np.ndarray      # (H, W, 3) float64, pre-quantization
    placements: dict         # image key -> canvas transform
    seam_map: np.ndarray     # (H, W) int32 index into sorted keys, -1 empty
    keys: tuple              # sorted image keys, indexes seam_map
    origin: np.ndarray       # canvas shift applied to all cameras
    edge_stats: dict         # edge key -> {"overlap_area": ...}


def _border_weight(h: int, w: int) -> np.ndarray:
    """Feather weight: distance to the nearest image border, peak-normalized."""
    ys = np.minimum(np.arange(h) + 0.5, h - 0.5 - np.arange(h))
    xs = np.minimum(np.arange(w) + 0.5, w - 0.5 - np.arange(w))
    weight = np.minimum.outer(ys, xs)
    return weight / weight.max()


def _corners(h: int, w: int) -> np.ndarray:
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]])


def _bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Sample ``image`` at float coords; returns (values, validity mask)."""
    h, w = image.shape[:2]
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x = np.clip(xs, 0, w - 1)
    y = np.clip(ys, 0, h - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None] if image.ndim == 3 else (x - x0)
    fy = (y - y0)[..., None] if image.ndim == 3 else (y - y0)
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bottom * fy, valid


def blend_compose(graph: DataGraph, max_canvas_pixels: int = MAX_CANVAS_PIXELS,
                  workers: int | None = None) -> Panorama:
    """Composite refined images onto one canvas with feather blending.

    The canvas is the bounding box of every transformed image corner; each
    output pixel is the border-distance-weighted average of the images
    covering it, and the seam map records which image dominates where.
    """
    graph.require_connected()
    keys = tuple(sorted(graph.vertices))

    all_corners = []
    for key in keys:
        vertex = graph.vertices[key]
        h, w = vertex.image.shape[:2]
        all_corners.append(transform_points(vertex.camera, _corners(h, w)))
    stacked = np.vstack(all_corners)
    low = np.floor(stacked.min(axis=0))
    high = np.ceil(stacked.max(axis=0))
    canvas_w = int(high[0] - low[0]) + 1
    canvas_h = int(high[1] - low[1]) + 1
    if canvas_w * canvas_h > max_canvas_pixels:
        raise CanvasOverflow(
            f"canvas {canvas_w}x{canvas_h} exceeds {max_canvas_pixels} pixels")
    origin = low

    # Edge-parallel seam statistics: overlap of the two placed footprints,
    # recorded on the edge payloads for the stitch report.
    def seam_stats(a, b, edge, va, vb):
        boxes = []
        for vertex in (va, vb):
            h, w = vertex.image.shape[:2]
            pts = transform_points(vertex.camera, _corners(h, w)) - origin
            boxes.append((pts.min(axis=0), pts.max(axis=0)))
        lo = np.maximum(boxes[0][0], boxes[1][0])
        hi = np.minimum(boxes[0][1], boxes[1][1])
        overlap = float(max(hi[0] - lo[0], 0.0) * max(hi[1] - lo[1], 0.0))
        return {"overlap_area": overlap}

    with_stats = run_edge_parallel(graph, seam_stats, workers=workers)
    edge_stats = dict(with_stats.edges)

    acc_color = np.zeros((canvas_h, canvas_w, 3))
    acc_weight = np.zeros((canvas_h, canvas_w))
    best_weight = np.zeros((canvas_h, canvas_w))
    seam_map = np.full((canvas_h, canvas_w), -1, dtype=np.int32)

    for index, key in enumerate(keys):
        vertex = graph.vertices[key]
        image = np.asarray(vertex.image, dtype=np.float64)
        if image.ndim == 2:
            image = np.stack([image] * 3, axis=2)
        image = image[:, :, :3]
        h, w = image.shape[:2]
        weight = _border_weight(h, w)

        placed = transform_points(vertex.camera, _corners(h, w)) - origin
        x_lo = max(int(np.floor(placed[:, 0].min())), 0)
        x_hi = min(int(np.ceil(placed[:, 0].max())) + 1, canvas_w)
        y_lo = max(int(np.floor(placed[:, 1].min())), 0)
        y_hi = min(int(np.ceil(placed[:, 1].max())) + 1, canvas_h)
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        gx, gy = np.meshgrid(np.arange(x_lo, x_hi, dtype=np.float64),
                             np.arange(y_lo, y_hi, dtype=np.float64))
        inverse = invert_transform(vertex.camera)
        source = transform_points(
            inverse, np.stack([gx.ravel() + origin[0], gy.ravel() + origin[1]], axis=1))
        sx = source[:, 0].reshape(gx.shape)
        sy = source[:, 1].reshape(gy.shape)
        colors, valid = _bilinear(image, sx, sy)
        weights, _ = _bilinear(weight, sx, sy)
        weights = np.where(valid, np.maximum(weights, 1e-6), 0.0)

        region = (slice(y_lo, y_hi), slice(x_lo, x_hi))
        acc_color[region] += colors * weights[..., None]
        acc_weight[region] += weights
        better = weights > best_weight[region]
        best_weight[region][better] = weights[better]
        seam_map[region][better] = index

    covered = acc_weight > 0
    blended = np.zeros_like(acc_color)
    blended[covered] = acc_color[covered] / acc_weight[covered][:, None]
    pixels = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    placements = {key: graph.vertices[key].camera for key in keys}
    return Panorama(pixels, blended, placements, seam_map, keys, origin, edge_stats)


def stitch_report(graph: DataGraph, refinement: RefinementReport,
                  panorama: Panorama) -> dict:
    """Structured summary of a stitching run (stored as a job artifact)."""
    edges = []
    for (a, b), edge in sorted(graph.edges.items()):
        stats = panorama.edge_stats.get((a, b), {})
        edges.append({
            "pair": [a, b],
            "inliers": edge.inliers,
            "matches": len(edge.matches),
            "overlap_area": stats.get("overlap_area"),
        })
    return {
        "images": list(panorama.keys),
        "canvas": [int(panorama.pixels.shape[1]), int(panorama.pixels.shape[0])],
        "rounds": refinement.engine.rounds,
        "final_residual": refinement.engine.final_residual,
        "objective_trace_head": list(refinement.objective_trace[:5]),
        "objective_final": refinement.objective_trace[-1],
        "edges": edges,
    }

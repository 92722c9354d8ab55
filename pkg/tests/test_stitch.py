import numpy as np
import pytest

from visiongrid import errors
from visiongrid.graph import DataGraph
from visiongrid.stitch import (
    AFFINE,
    TRANSLATION,
    StitchEdge,
    StitchVertex,
    alignment_objective,
    blend_compose,
    build_stitch_graph,
    detect_keypoints,
    identity_camera,
    match_pair,
    motion_model_from_warp,
    refine_cameras,
    stitch_report,
)

def textured_scene(h, w, seed=0, blobs=140):
    """Synthetic corner-rich scene: random bright rectangles on dark noise."""
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 40, size=(h, w, 3), dtype=np.uint8).astype(np.int32)
    for _ in range(blobs):
        bw = int(rng.integers(6, 24))
        bh = int(rng.integers(6, 24))
        x = int(rng.integers(0, w - bw))
        y = int(rng.integers(0, h - bh))
        color = rng.integers(60, 255, size=3)
        img[y:y + bh, x:x + bw] = color
    return img.astype(np.uint8)


def window(scene, x, y, w, h):
    return scene[y:y + h, x:x + w].copy()


def vertex_for(key, image, model=TRANSLATION):
    points, descriptors = detect_keypoints(image)
    return StitchVertex(key, image, points, descriptors, identity_camera(model))


def translation_vertex(key, camera=(0.0, 0.0)):
    """Bare vertex for refinement-only tests (no pixels needed)."""
    return StitchVertex(key, np.zeros((2, 2)), np.empty((0, 2)),
                        np.empty((0, 64)), np.asarray(camera, dtype=np.float64))


def translation_edge(a, b, t):
    return StitchEdge(a, b, np.asarray(t, dtype=np.float64), (), 99)


def centralized_translation_lsq(n, edges, anchor=0):
    """Direct normal-equations solve of the alignment problem (oracle).

    ``edges`` is a list of (i, j, t) with the convention p_i - p_j = t.
    The anchor is pinned at the origin by substitution.
    """
    free = [v for v in range(n) if v != anchor]
    index = {v: k for k, v in enumerate(free)}
    solution = np.zeros((n, 2))
    for axis in range(2):
        a = np.zeros((len(free), len(free)))
        rhs = np.zeros(len(free))
        for i, j, t in edges:
            for v, u, sign in ((i, j, 1.0), (j, i, -1.0)):
                if v == anchor:
                    continue
                a[index[v], index[v]] += 1.0
                rhs[index[v]] += sign * t[axis]
                if u != anchor:
                    a[index[v], index[u]] -= 1.0
        x = np.linalg.solve(a, rhs)
        for v in free:
            solution[v, axis] = x[index[v]]
    return solution


def random_connected_instance(rng, n):
    """Random spanning tree plus extra edges, with ground-truth positions."""
    truth = rng.uniform(-40, 40, size=(n, 2))
    edges = []
    for v in range(1, n):
        u = int(rng.integers(0, v))
        edges.append((u, v))
    extra = rng.integers(0, n)
    for _ in range(int(extra)):
        i, j = rng.choice(n, size=2, replace=False)
        key = (min(int(i), int(j)), max(int(i), int(j)))
        if key not in [(min(a, b), max(a, b)) for a, b in edges]:
            edges.append(key)
    return truth, edges


def refinement_graph(n, measurement_edges):
    vertices = {v: translation_vertex(v) for v in range(n)}
    payloads = [(i, j, translation_edge(i, j, t)) for i, j, t in measurement_edges]
    return DataGraph(vertices, payloads)


class TestDetectKeypoints:
    def test_uniform_image_has_no_keypoints(self):
        points, descriptors = detect_keypoints(np.full((64, 64, 3), 128, np.uint8))
        assert len(points) == 0 and len(descriptors) == 0

    def test_checkerboard_corners_within_one_pixel(self):
        cell = 16
        n = 6
        board = np.zeros((cell * n, cell * n), dtype=np.uint8)
        yy, xx = np.mgrid[0:cell * n, 0:cell * n]
        board[((yy // cell + xx // cell) % 2) == 1] = 255
        points, _ = detect_keypoints(board)
        assert len(points) > 0
        # True corners sit between pixels, at (k*cell - 0.5).
        expected = {(x * cell - 0.5, y * cell - 0.5)
                    for x in range(1, n) for y in range(1, n)}
        for px, py in points:
            nearest = min(max(abs(px - ex), abs(py - ey)) for ex, ey in expected)
            assert nearest <= 1.0, f"keypoint ({px},{py}) far from any corner"
        # Interior corners should be covered nearly completely.
        covered = sum(
            1 for ex, ey in expected
            if any(max(abs(px - ex), abs(py - ey)) <= 1.0 for px, py in points))
        assert covered >= 0.9 * len(expected)

    def test_deterministic(self):
        scene = textured_scene(120, 160, seed=5)
        p1, d1 = detect_keypoints(scene)
        p2, d2 = detect_keypoints(scene)
        assert np.array_equal(p1, p2) and np.array_equal(d1, d2)

    def test_descriptors_unit_norm(self):
        scene = textured_scene(100, 100, seed=6)
        _, descriptors = detect_keypoints(scene)
        norms = np.linalg.norm(descriptors, axis=1)
        assert np.allclose(norms[norms > 0], 1.0, atol=1e-9)


class TestMatchPair:
    def test_self_match_is_identity(self):
        scene = textured_scene(140, 180, seed=7)
        v = vertex_for("a", scene)
        edge = match_pair(v, v.with_camera(v.camera), TRANSLATION)
        assert edge is not None
        assert np.allclose(edge.transform, [0.0, 0.0], atol=1e-9)
        assert edge.inliers == len(edge.matches)

    def test_known_shift_recovered(self):
        scene = textured_scene(200, 320, seed=8)
        a = vertex_for("a", window(scene, 0, 0, 220, 180))
        b = vertex_for("b", window(scene, 10, 0, 220, 180))
        edge = match_pair(a, b, TRANSLATION)
        assert edge is not None
        # Content at x in a sits at x-10 in b.
        assert np.allclose(edge.transform, [-10.0, 0.0], atol=0.5)
        assert edge.inliers >= 8

    def test_unrelated_noise_has_no_edge(self):
        rng = np.random.default_rng(9)
        a = vertex_for("a", rng.integers(0, 255, (100, 100, 3), dtype=np.uint8))
        b = vertex_for("b", rng.integers(0, 255, (100, 100, 3), dtype=np.uint8))
        assert match_pair(a, b, TRANSLATION) is None

    def test_affine_shift_recovered(self):
        scene = textured_scene(200, 320, seed=10)
        a = vertex_for("a", window(scene, 0, 10, 200, 170), AFFINE)
        b = vertex_for("b", window(scene, 14, 0, 200, 170), AFFINE)
        edge = match_pair(a, b, AFFINE)
        assert edge is not None
        assert np.allclose(edge.transform[:, :2], np.eye(2), atol=0.05)
        assert np.allclose(edge.transform[:, 2], [-14.0, 10.0], atol=0.8)

    def test_deterministic_given_seed(self):
        scene = textured_scene(160, 240, seed=12)
        a = vertex_for("a", window(scene, 0, 0, 180, 150))
        b = vertex_for("b", window(scene, 25, 5, 180, 150))
        e1 = match_pair(a, b, TRANSLATION, seed=21)
        e2 = match_pair(a, b, TRANSLATION, seed=21)
        assert e1 is not None and e2 is not None
        assert np.array_equal(e1.transform, e2.transform)
        assert e1.matches == e2.matches


class TestMotionModel:
    def test_warp_mapping(self):
        assert motion_model_from_warp(None) == TRANSLATION
        assert motion_model_from_warp("plane") == AFFINE
        assert motion_model_from_warp("affine") == AFFINE
        with pytest.raises(ValueError):
            motion_model_from_warp("spherical")


class TestRefineCameras:
    def test_exact_chain_recovers_positions(self):
        # Chain 0-1-2 with offsets (10,0) then (0,5): measurements are
        # p_i - p_j = t for edge (i, j) oriented source->target, where the
        # transform maps source coords into target coords (t_ij = p_i - p_j).
        edges = [(0, 1, np.array([-10.0, 0.0])), (1, 2, np.array([0.0, -5.0]))]
        graph = refinement_graph(3, edges)
        refined, report = refine_cameras(graph, anchor=0, epsilon=1e-13,
                                         max_rounds=5000)
        cams = {v: refined.vertices[v].camera for v in range(3)}
        assert np.allclose(cams[0], [0, 0], atol=1e-9)
        assert np.allclose(cams[1], [10, 0], atol=1e-9)
        assert np.allclose(cams[2], [10, 5], atol=1e-9)
        assert report.objective_trace[-1] < 1e-15

    def test_noisy_graph_matches_centralized_solution(self):
        # Edge (i, j) transforms carry t = p_i - p_j, so the oracle solves
        # the same constraint system directly.
        rng = np.random.default_rng(31)
        for _ in range(10):
            n = int(rng.integers(3, 10))
            truth, edge_list = random_connected_instance(rng, n)
            measurements = [
                (i, j, truth[i] - truth[j] + rng.normal(0, 0.3, size=2))
                for i, j in edge_list
            ]
            oracle = centralized_translation_lsq(n, measurements, anchor=0)
            graph = refinement_graph(n, measurements)
            refined, _ = refine_cameras(graph, anchor=0, epsilon=1e-12,
                                        max_rounds=20000)
            for v in range(n):
                assert np.allclose(refined.vertices[v].camera, oracle[v],
                                   atol=1e-6), f"vertex {v}"

    def test_objective_monotone_non_increasing(self):
        rng = np.random.default_rng(32)
        for _ in range(5):
            n = int(rng.integers(3, 11))
            truth, edge_list = random_connected_instance(rng, n)
            measurements = [
                (i, j, -(truth[i] - truth[j]) - rng.normal(0, 1.0, size=2))
                for i, j in edge_list
            ]
            graph = refinement_graph(n, measurements)
            _, report = refine_cameras(graph, anchor=0, epsilon=1e-12,
                                       max_rounds=3000)
            trace = report.objective_trace
            for a, b in zip(trace, trace[1:]):
                assert b <= a + 1e-12

    def test_disconnected_graph_rejected(self):
        vertices = {v: translation_vertex(v) for v in range(4)}
        graph = DataGraph(vertices, [(0, 1, translation_edge(0, 1, [1, 0])),
                                     (2, 3, translation_edge(2, 3, [0, 1]))])
        with pytest.raises(errors.DisconnectedGraph):
            refine_cameras(graph, anchor=0)

    def test_affine_exact_measurements(self):
        rng = np.random.default_rng(33)
        truth = [np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])]
        for _ in range(3):
            angle = rng.uniform(-0.3, 0.3)
            c, s = np.cos(angle), np.sin(angle)
            shift = rng.uniform(-20, 20, size=2)
            truth.append(np.array([[c, -s, shift[0]], [s, c, shift[1]]]))

        def to_h(m):
            return np.vstack([m, [0.0, 0.0, 1.0]])

        vertices = {
            v: StitchVertex(v, np.zeros((2, 2)), np.empty((0, 2)),
                            np.empty((0, 64)), identity_camera(AFFINE))
            for v in range(4)
        }
        payloads = []
        for i, j in [(0, 1), (1, 2), (2, 3), (0, 3)]:
            # place_i = place_j . T_ij  =>  T_ij = place_j^-1 . place_i
            t = (np.linalg.inv(to_h(truth[j])) @ to_h(truth[i]))[:2, :]
            payloads.append((i, j, StitchEdge(i, j, t, (), 99)))
        graph = DataGraph(vertices, payloads)
        refined, report = refine_cameras(graph, anchor=0, epsilon=1e-14,
                                         max_rounds=20000)
        for v in range(4):
            assert np.allclose(refined.vertices[v].camera, truth[v], atol=1e-8)
        trace = report.objective_trace
        for a, b in zip(trace, trace[1:]):
            assert b <= a + 1e-12


class TestBlendCompose:
    def test_single_image_identity(self):
        scene = textured_scene(80, 100, seed=40)
        graph = DataGraph({"a": vertex_for("a", scene)})
        pano = blend_compose(graph)
        assert pano.pixels.shape == (80, 100, 3)
        assert np.array_equal(pano.pixels, scene)
        assert np.all(pano.seam_map == 0)

    def test_exact_overlap_preserves_content(self):
        scene = textured_scene(120, 260, seed=41)
        left = window(scene, 0, 0, 160, 120)
        right = window(scene, 100, 0, 160, 120)
        va = vertex_for("a", left)
        vb = vertex_for("b", right).with_camera(np.array([100.0, 0.0]))
        graph = DataGraph({"a": va, "b": vb},
                          [("a", "b", translation_edge("a", "b", [-100.0, 0.0]))])
        pano = blend_compose(graph)
        assert pano.pixels.shape == (120, 260, 3)
        diff = pano.pixels.astype(int) - scene.astype(int)
        assert np.abs(diff).max() <= 1

    def test_conflicting_overlap_stays_between_sources(self):
        dark = np.full((60, 90, 3), 40, dtype=np.uint8)
        bright = np.full((60, 90, 3), 200, dtype=np.uint8)
        va = vertex_for("a", textured_scene(60, 90, seed=42))
        vb = vertex_for("b", textured_scene(60, 90, seed=43))
        va = StitchVertex("a", dark, va.keypoints, va.descriptors,
                          np.array([0.0, 0.0]))
        vb = StitchVertex("b", bright, vb.keypoints, vb.descriptors,
                          np.array([45.0, 0.0]))
        graph = DataGraph({"a": va, "b": vb},
                          [("a", "b", translation_edge("a", "b", [-45.0, 0.0]))])
        pano = blend_compose(graph)
        overlap = pano.blended[:, 45:90]
        assert overlap.min() >= 40 - 1e-9
        assert overlap.max() <= 200 + 1e-9

    def test_canvas_overflow_guard(self):
        va = vertex_for("a", textured_scene(60, 60, seed=44))
        vb = va.with_camera(np.array([1e6, 1e6]))
        graph = DataGraph({"a": va, "b": StitchVertex("b", va.image, va.keypoints,
                                                      va.descriptors, vb.camera)},
                          [("a", "b", translation_edge("a", "b", [0.0, 0.0]))])
        with pytest.raises(errors.CanvasOverflow):
            blend_compose(graph, max_canvas_pixels=1_000_000)


class TestFullPipeline:
    def test_three_window_panorama(self):
        scene = textured_scene(170, 420, seed=50, blobs=260)
        tiles = {
            "t0": window(scene, 0, 0, 180, 150),
            "t1": window(scene, 120, 10, 180, 150),
            "t2": window(scene, 230, 4, 180, 150),
        }
        graph = build_stitch_graph(tiles, TRANSLATION, workers=2)
        assert len(graph.edges) >= 2
        graph.require_connected()
        refined, refinement = refine_cameras(graph, anchor=sorted(tiles)[0],
                                             epsilon=1e-11, max_rounds=8000)
        pano = blend_compose(refined)
        report = stitch_report(refined, refinement, pano)
        # Canvas must cover roughly the union footprint of the three tiles.
        assert report["canvas"][0] > 300
        assert report["canvas"][1] >= 150
        assert refinement.objective_trace[-1] <= refinement.objective_trace[0]

        # Relative placements recover the windows' true offsets.
        cams = {k: refined.vertices[k].camera for k in tiles}
        d01 = cams["t1"] - cams["t0"]
        d12 = cams["t2"] - cams["t1"]
        assert np.allclose(d01, [120.0, 10.0], atol=1.0)
        assert np.allclose(d12, [110.0, -6.0], atol=1.0)

    def test_stage_outputs_independent_of_thread_count(self):
        scene = textured_scene(150, 330, seed=52, blobs=220)
        tiles = {
            "t0": window(scene, 0, 0, 170, 140),
            "t1": window(scene, 110, 6, 170, 140),
            "t2": window(scene, 60, 2, 170, 140),
        }
        graphs = [build_stitch_graph(tiles, TRANSLATION, workers=w)
                  for w in (1, 4)]
        for key in tiles:
            a, b = graphs[0].vertices[key], graphs[1].vertices[key]
            assert np.array_equal(a.keypoints, b.keypoints)
            assert np.array_equal(a.descriptors, b.descriptors)
        assert set(graphs[0].edges) == set(graphs[1].edges)
        for pair, ea in graphs[0].edges.items():
            eb = graphs[1].edges[pair]
            assert np.array_equal(ea.transform, eb.transform)
            assert ea.matches == eb.matches

    def test_gauge_invariance_same_panorama(self):
        scene = textured_scene(150, 330, seed=51, blobs=220)
        tiles = {
            "t0": window(scene, 0, 0, 170, 140),
            "t1": window(scene, 110, 6, 170, 140),
        }
        # Identical measurements from two "global positions" differing by a
        # constant shift produce identical refinements and pixels.
        graph1 = build_stitch_graph(tiles, TRANSLATION)
        graph2 = build_stitch_graph(tiles, TRANSLATION)
        r1, _ = refine_cameras(graph1, anchor="t0", epsilon=1e-12)
        r2, _ = refine_cameras(graph2, anchor="t0", epsilon=1e-12)
        p1 = blend_compose(r1)
        p2 = blend_compose(r2)
        assert np.array_equal(p1.pixels, p2.pixels)

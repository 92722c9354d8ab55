"""Functionality handlers.

Each handler takes the task envelope, the decoded images, an event sink and
the worker context; it stores its artifacts, streams output lines, and
returns a JSON-serializable summary for the task_done event.
"""

from __future__ import annotations

import json

from .. import matcontainer
from ..classify import extract_features_cached, predict_top_k
from ..errors import HandlerError
from ..stitch import (
    blend_compose,
    build_stitch_graph,
    motion_model_from_warp,
    refine_cameras,
    stitch_report,
)
from ..vip import detect_faces, score_and_rank
from .context import WorkerContext, encode_png


def _artifact_key(envelope, name: str) -> str:
    return f"{envelope.job_id}/{envelope.task_index}/{name}"


def _image_tag(ref) -> str:
    tail = ref.path.rsplit("/", 1)[-1] or ref.path
    return tail if tail else (ref.content_hash or "?")[:12]


def handle_classify(envelope, images, sink, ctx: WorkerContext) -> dict:
    results = []
    for ref, image in images:
        features, hit = extract_features_cached(
            image, ctx.backend, ctx.cache, ref.content_hash, ctx.crop_ratio)
        top = predict_top_k(features, ctx.model, k=5)
        line = ", ".join(f"{label} {confidence:.4f}" for label, confidence in top)
        sink.output(f"{_image_tag(ref)}: {line}")
        results.append({"image": ref.content_hash, "name": _image_tag(ref),
                        "top": [[label, confidence] for label, confidence in top],
                        "cache": "hit" if hit else "miss"})
    key = _artifact_key(envelope, "classify.json")
    ctx.storage.store("artifacts", json.dumps({"results": results}).encode(), key=key)
    sink.artifact(key)
    return {"kind": "classify", "images": len(results), "artifact": key,
            "results": results}


def handle_features(envelope, images, sink, ctx: WorkerContext) -> dict:
    backend = ctx.backend_for(envelope.params)
    entries = []
    for ref, image in images:
        features, hit = extract_features_cached(
            image, backend, ctx.cache, ref.content_hash, ctx.crop_ratio)
        key = _artifact_key(envelope, f"features-{ref.content_hash[:16]}.ccvm")
        ctx.storage.store("artifacts", matcontainer.write_matrix(features), key=key)
        sink.output(
            f"{_image_tag(ref)}: features {features.shape[0]}x{features.shape[1]} "
            f"({'cache hit' if hit else 'computed'})")
        sink.artifact(key)
        entries.append({"image": ref.content_hash, "artifact": key,
                        "shape": list(features.shape),
                        "cache": "hit" if hit else "miss"})
    return {"kind": "features", "images": len(entries), "entries": entries,
            "backend": backend.name, "dim": backend.dim}


def _parse_face_boxes(raw: str):
    boxes = []
    for part in raw.split(";"):
        part = part.strip()
        if not part:
            continue
        pieces = [p.strip() for p in part.split(",")]
        if len(pieces) != 4:
            raise HandlerError(f"face box {part!r} is not x,y,w,h")
        boxes.append(tuple(float(p) for p in pieces))
    return boxes


def handle_vip(envelope, images, sink, ctx: WorkerContext) -> dict:
    faces_param = envelope.params.get("faces", "builtin")
    results = []
    for ref, image in images:
        height, width = image.shape[:2]
        mode = "builtin" if faces_param == "builtin" else _parse_face_boxes(faces_param)
        boxes = detect_faces(image, mode=mode)
        ranking = score_and_rank(boxes, ctx.regressor, width, height)
        by_index = {box.index: box for box in boxes}
        entries = [
            {"rank": rank + 1, "face_index": face_index, "score": score,
             "box": by_index[face_index].to_dict()}
            for rank, (face_index, score) in enumerate(ranking.entries)
        ]
        for entry in entries:
            sink.output(
                f"{_image_tag(ref)}: rank {entry['rank']} face {entry['face_index']} "
                f"score {entry['score']:.4f}")
        if not entries:
            sink.output(f"{_image_tag(ref)}: no faces found")
        results.append({"image": ref.content_hash, "name": _image_tag(ref),
                        "width": width, "height": height, "faces": entries})
    key = _artifact_key(envelope, "vip.json")
    ctx.storage.store("artifacts", json.dumps({"results": results}).encode(), key=key)
    sink.artifact(key)
    return {"kind": "vip", "images": len(results), "artifact": key,
            "results": results}


def handle_stitch(envelope, images, sink, ctx: WorkerContext) -> dict:
    model = motion_model_from_warp(envelope.params.get("warp"))
    tiles = {}
    for position, (ref, image) in enumerate(images):
        # Position prefix keeps keys unique even for duplicate content.
        tiles[f"{position:03d}-{ref.content_hash[:12]}"] = image

    def progress(stage, key, value):
        if stage == "keypoints":
            sink.output(f"keypoints {key}: {value} points")
        elif stage == "match" and value:
            sink.output(f"match {key}: {value} inliers")

    graph = build_stitch_graph(tiles, model, workers=ctx.engine_workers,
                               seed=ctx.stitch_seed, on_progress=progress)
    sink.output(f"match graph: {len(graph.edges)} overlapping pairs")
    anchor = sorted(tiles)[0]
    refined, refinement = refine_cameras(graph, anchor,
                                         epsilon=1e-9, max_rounds=10_000,
                                         workers=ctx.engine_workers)
    sink.output(
        f"refinement: {refinement.engine.rounds} rounds, "
        f"alignment objective {refinement.objective_trace[-1]:.6g}")
    panorama = blend_compose(refined, workers=ctx.engine_workers)
    sink.output(
        f"panorama: {panorama.pixels.shape[1]}x{panorama.pixels.shape[0]}")

    png_key = _artifact_key(envelope, "panorama.png")
    ctx.storage.store("artifacts", encode_png(panorama.pixels), key=png_key)
    sink.artifact(png_key)
    report = stitch_report(refined, refinement, panorama)
    report_key = _artifact_key(envelope, "stitch-report.json")
    ctx.storage.store("artifacts", json.dumps(report).encode(), key=report_key)
    sink.artifact(report_key)
    return {"kind": "ImageStitch", "images": len(images),
            "canvas": report["canvas"], "rounds": report["rounds"],
            "artifact": png_key, "report": report_key}


HANDLERS = {
    "classify": handle_classify,
    "features": handle_features,
    "vip": handle_vip,
    "ImageStitch": handle_stitch,
}

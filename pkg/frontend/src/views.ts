/**
 * Result view models: pure builders from task summaries / artifacts to the
 * structures the DOM layer renders.  Keeping these free of DOM calls is
 * what lets the conformance tests drive them headless.
 */

import type { ClassifyEntry, VipEntry } from "./protocol.js";
import type { JobStore } from "./store.js";

export interface ClassifyRow {
  label: string;
  confidence: number;
  /** 0..100, for the confidence bar width. */
  percent: number;
}

export interface ClassifyTable {
  image: string;
  rows: ClassifyRow[];
}

export interface VipOverlay {
  image: string;
  width: number;
  height: number;
  boxes: Array<{ rank: number; x: number; y: number; w: number; h: number; score: number }>;
}

export interface ResultView {
  kind: "classify" | "panorama" | "vip" | "features" | "raw";
  tables?: ClassifyTable[];
  panoramaUrl?: string;
  overlays?: VipOverlay[];
  downloads?: Array<{ key: string; url: string }>;
  raw?: string;
}

/** Top-k rows sorted by confidence descending (ties by label). */
export function buildClassifyTable(entry: ClassifyEntry): ClassifyTable {
  const rows = [...entry.top]
    .sort((a, b) => (b[1] - a[1]) || a[0].localeCompare(b[0]))
    .map(([label, confidence]) => ({
      label,
      confidence,
      percent: Math.round(confidence * 1000) / 10,
    }));
  return { image: entry.name || entry.image, rows };
}

export function buildVipOverlay(entry: VipEntry): VipOverlay {
  return {
    image: entry.name || entry.image,
    width: entry.width,
    height: entry.height,
    boxes: entry.faces.map((face) => ({
      rank: face.rank,
      x: face.box.x,
      y: face.box.y,
      w: face.box.w,
      h: face.box.h,
      score: face.score,
    })),
  };
}

/**
 * Assemble the result panel for a finished job from its store state.
 * ``artifactUrl`` maps an artifact key to its download URL.
 */
export function buildResultView(
  store: JobStore,
  artifactUrl: (key: string) => string,
): ResultView {
  const summaries = store.results.map((r) => r.summary);
  switch (store.functionality) {
    case "classify": {
      const tables: ClassifyTable[] = [];
      for (const summary of summaries) {
        for (const entry of (summary["results"] as ClassifyEntry[] | undefined) ?? []) {
          tables.push(buildClassifyTable(entry));
        }
      }
      return { kind: "classify", tables };
    }
    case "ImageStitch": {
      const key = store.artifacts.find((k) => k.endsWith("panorama.png"));
      return key
        ? { kind: "panorama", panoramaUrl: artifactUrl(key) }
        : { kind: "raw", raw: JSON.stringify(summaries) };
    }
    case "vip": {
      const overlays: VipOverlay[] = [];
      for (const summary of summaries) {
        for (const entry of (summary["results"] as VipEntry[] | undefined) ?? []) {
          overlays.push(buildVipOverlay(entry));
        }
      }
      return { kind: "vip", overlays };
    }
    case "features": {
      const downloads = store.artifacts
        .filter((key) => key.endsWith(".ccvm"))
        .map((key) => ({ key, url: artifactUrl(key) }));
      return { kind: "features", downloads };
    }
    default:
      return { kind: "raw", raw: JSON.stringify(summaries, null, 2) };
  }
}

import { describe, expect, it } from "vitest";

import type { JobStatus, ServerEvent } from "../src/protocol.js";
import { JobStore } from "../src/store.js";

function line(job: string, task: number, seq: number, text: string): ServerEvent {
  return { type: "output_line", job_id: job, task, seq, payload: text };
}

describe("JobStore", () => {
  it("tracks the lifecycle badge", () => {
    const store = new JobStore("j1", "classify");
    expect(store.badge).toBe("submitted");
    store.apply({ type: "accepted", job_id: "j1", task: null, seq: 0 });
    expect(store.badge).toBe("accepted");
    store.apply({ type: "task_started", job_id: "j1", task: 0, seq: 0 });
    expect(store.badge).toBe("running");
    store.apply({
      type: "job_done", job_id: "j1", task: null, seq: 1,
      payload: JSON.stringify({ state: "done" }),
    });
    expect(store.badge).toBe("done");
    expect(store.isTerminal).toBe(true);
  });

  it("appends terminal lines in received order", () => {
    const store = new JobStore("j1", "classify");
    for (let i = 0; i < 3; i++) store.apply(line("j1", 0, i, `line ${i}`));
    expect(store.lines.map((l) => l.text)).toEqual(["line 0", "line 1", "line 2"]);
    expect(store.terminalText).toBe("line 0\nline 1\nline 2");
  });

  it("deduplicates by task and seq", () => {
    const store = new JobStore("j1", "classify");
    expect(store.apply(line("j1", 0, 0, "once"))).toBe(true);
    expect(store.apply(line("j1", 0, 0, "once"))).toBe(false);
    expect(store.apply(line("j1", 1, 0, "other task"))).toBe(true);
    expect(store.lines).toHaveLength(2);
  });

  it("ignores events for other jobs", () => {
    const store = new JobStore("j1", "classify");
    expect(store.apply(line("j2", 0, 0, "foreign"))).toBe(false);
    expect(store.lines).toHaveLength(0);
  });

  it("marks failed jobs from the job_done payload", () => {
    const store = new JobStore("j1", "classify");
    store.apply({
      type: "failed", job_id: "j1", task: 0, seq: 3,
      payload: JSON.stringify({ error: "HandlerError", final: true }),
    });
    store.apply({
      type: "job_done", job_id: "j1", task: null, seq: 0,
      payload: JSON.stringify({ state: "failed" }),
    });
    expect(store.badge).toBe("failed");
    expect(store.failures).toHaveLength(1);
  });

  it("absorbs a status snapshot idempotently", () => {
    const store = new JobStore("j1", "classify");
    store.apply(line("j1", 0, 0, "live line"));
    const status: JobStatus = {
      job_id: "j1",
      functionality: "classify",
      state: "running",
      session_id: "s",
      n_images: 1,
      created_at: 0,
      finished_at: null,
      tasks: [{ index: 0, state: "running", attempt: 1, artifacts: [], events: 2 }],
      counts: { pending: 0, running: 1, done: 0, failed: 0 },
      artifacts: [],
      events: [
        line("j1", 0, 0, "live line"),
        line("j1", 0, 1, "replayed line"),
      ],
    };
    store.absorbStatus(status);
    store.absorbStatus(status);
    expect(store.lines.map((l) => l.text)).toEqual(["live line", "replayed line"]);
    expect(store.badge).toBe("running");
  });

  it("collects artifacts and results", () => {
    const store = new JobStore("j1", "features");
    store.apply({ type: "artifact", job_id: "j1", task: 0, seq: 1, payload: "j1/0/f.ccvm" });
    store.apply({
      type: "task_done", job_id: "j1", task: 0, seq: 2,
      payload: JSON.stringify({ kind: "features", images: 1 }),
    });
    expect(store.artifacts).toEqual(["j1/0/f.ccvm"]);
    expect(store.results[0].summary["kind"]).toBe("features");
  });
});

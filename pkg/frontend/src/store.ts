/**
 * Per-job view state, driven entirely by server events.
 *
 * Every event -- live from the socket or replayed from the status endpoint
 * after a reconnect -- funnels through {@link JobStore.apply}, which
 * deduplicates by (task, seq) so a replayed stream can never double lines.
 * The badge always reflects the most recent lifecycle event, and a refresh
 * can rebuild the whole view from one status fetch.
 */

import type { JobStatus, ServerEvent } from "./protocol.js";

export type Badge = "submitted" | "accepted" | "running" | "done" | "failed";

export interface TerminalLine {
  task: number | null;
  seq: number;
  text: string;
}

export interface TaskResult {
  task: number;
  summary: Record<string, unknown>;
}

export class JobStore {
  readonly jobId: string;
  readonly functionality: string;
  badge: Badge = "submitted";
  lines: TerminalLine[] = [];
  artifacts: string[] = [];
  results: TaskResult[] = [];
  failures: string[] = [];
  private seen = new Set<string>();
  private listeners: Array<() => void> = [];

  constructor(jobId: string, functionality: string) {
    this.jobId = jobId;
    this.functionality = functionality;
  }

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const listener of this.listeners) listener();
  }

  /** Apply one event; returns false for duplicates and foreign events. */
  apply(event: ServerEvent): boolean {
    if (event.job_id !== this.jobId) return false;
    const key = `${event.task ?? "job"}:${event.seq ?? 0}:${event.type}`;
    if (this.seen.has(key)) return false;
    this.seen.add(key);

    switch (event.type) {
      case "accepted":
        if (this.badge === "submitted") this.badge = "accepted";
        break;
      case "task_started":
        if (this.badge !== "done" && this.badge !== "failed") {
          this.badge = "running";
        }
        break;
      case "output_line":
        this.lines.push({
          task: event.task ?? null,
          seq: event.seq ?? 0,
          text: event.payload ?? "",
        });
        break;
      case "artifact":
        if (event.payload) this.artifacts.push(event.payload);
        break;
      case "task_done":
        this.results.push({
          task: event.task ?? 0,
          summary: parseJson(event.payload) ?? {},
        });
        break;
      case "failed":
        if (event.payload) this.failures.push(event.payload);
        break;
      case "job_done": {
        const body = parseJson(event.payload);
        this.badge = body && body["state"] === "failed" ? "failed" : "done";
        break;
      }
      default:
        return false;
    }
    this.notify();
    return true;
  }

  /**
   * Merge a status snapshot (reconnect or refresh): replay the retained
   * event log through the same dedup, then trust the server's state.
   */
  absorbStatus(status: JobStatus): void {
    for (const event of status.events ?? []) this.apply(event);
    if (status.state === "done" || status.state === "failed") {
      this.badge = status.state;
    } else if (status.state === "running" && this.badge !== "running") {
      this.badge = "running";
    }
    for (const key of status.artifacts) {
      if (!this.artifacts.includes(key)) this.artifacts.push(key);
    }
    this.notify();
  }

  get terminalText(): string {
    return this.lines.map((line) => line.text).join("\n");
  }

  get isTerminal(): boolean {
    return this.badge === "done" || this.badge === "failed";
  }
}

function parseJson(text: string | undefined): Record<string, unknown> | null {
  if (!text) return null;
  try {
    const value = JSON.parse(text);
    return typeof value === "object" && value !== null ? value : null;
  } catch {
    return null;
  }
}

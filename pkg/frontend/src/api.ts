/** Thin client over the coordinator's documented HTTP endpoints. */

import type { JobStatus } from "./protocol.js";

export interface Submission {
  config: string;
  files?: File[];
  refs?: string[];
}

export class ApiClient {
  constructor(private readonly base: string = "") {}

  async submitJob(sessionId: string, submission: Submission): Promise<string> {
    const form = new FormData();
    form.append("spec", new Blob([submission.config], { type: "application/json" }),
      "config.json");
    for (const file of submission.files ?? []) {
      form.append("images", file, file.name);
    }
    if (submission.refs && submission.refs.length > 0) {
      form.append("refs", new Blob([JSON.stringify(submission.refs)],
        { type: "application/json" }), "refs.json");
    }
    const response = await fetch(`${this.base}/api/v1/jobs`, {
      method: "POST",
      headers: { "X-Session-Id": sessionId },
      body: form,
    });
    const body = await response.json();
    if (!response.ok) {
      throw new Error(`${body.error ?? response.status}: ${body.message ?? ""}`);
    }
    return body.job_id as string;
  }

  async getJob(jobId: string, includeEvents = true): Promise<JobStatus> {
    const suffix = includeEvents ? "" : "?events=0";
    const response = await fetch(`${this.base}/api/v1/jobs/${jobId}${suffix}`);
    if (!response.ok) throw new Error(`status ${response.status}`);
    return (await response.json()) as JobStatus;
  }

  artifactUrl(jobId: string, key: string): string {
    return `${this.base}/api/v1/jobs/${jobId}/artifacts/${key}`;
  }

  async fetchArtifactJson<T>(jobId: string, key: string): Promise<T> {
    const response = await fetch(this.artifactUrl(jobId, key));
    if (!response.ok) throw new Error(`artifact ${key}: ${response.status}`);
    return (await response.json()) as T;
  }
}

/** Build the config document a submission posts. */
export function buildConfig(functionality: string, params: Record<string, string>,
  inputPath = "local:/console-upload", output = "/tmp/visiongrid-out",
  maxim = 100): string {
  return JSON.stringify({
    exec: functionality,
    maxim,
    config: [{ name: functionality, path: inputPath, output, params }],
  });
}

/** A dropbox-stub picker path like "/1/" becomes the locator "dropbox:/1/". */
export function dropboxLocator(path: string): string {
  const trimmed = path.trim();
  return `dropbox:${trimmed.startsWith("/") ? "" : "/"}${trimmed}`;
}

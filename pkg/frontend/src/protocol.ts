/** Wire types for the coordinator's HTTP API and event channel. */

export type EventKind =
  | "hello"
  | "accepted"
  | "task_started"
  | "output_line"
  | "artifact"
  | "task_done"
  | "job_done"
  | "failed"
  | "subscribed"
  | "error";

export interface ServerEvent {
  type: EventKind;
  job_id?: string;
  task?: number | null;
  seq?: number;
  payload?: string;
  session_id?: string;
}

export interface TaskView {
  index: number;
  state: "pending" | "running" | "done" | "failed";
  attempt: number;
  artifacts: string[];
  events: number;
}

export interface JobStatus {
  job_id: string;
  functionality: string;
  state: "accepted" | "running" | "done" | "failed";
  session_id: string;
  n_images: number;
  created_at: number;
  finished_at: number | null;
  tasks: TaskView[];
  counts: { pending: number; running: number; done: number; failed: number };
  artifacts: string[];
  events?: ServerEvent[];
}

export interface ClassifyEntry {
  image: string;
  name: string;
  top: Array<[string, number]>;
  cache?: string;
}

export interface VipFace {
  rank: number;
  face_index: number;
  score: number;
  box: { x: number; y: number; w: number; h: number; index: number };
}

export interface VipEntry {
  image: string;
  name: string;
  width: number;
  height: number;
  faces: VipFace[];
}

export const FUNCTIONALITIES = ["classify", "features", "vip", "ImageStitch"] as const;
export type Functionality = (typeof FUNCTIONALITIES)[number];

/**
 * Event-channel client with automatic reconnect.
 *
 * On every (re)connection the server issues a fresh session via the hello
 * message.  After an unexpected drop the channel reconnects, re-subscribes
 * to every tracked job, and asks the owner to replay from the status
 * endpoint -- the stores' (task, seq) dedup makes that replay idempotent.
 */

import type { ServerEvent } from "./protocol.js";

type WebSocketLike = {
  send(data: string): void;
  close(): void;
  onmessage: ((event: { data: unknown }) => void) | null;
  onopen: (() => void) | null;
  onclose: (() => void) | null;
  onerror: ((error: unknown) => void) | null;
};

export interface ChannelCallbacks {
  onSession: (sessionId: string) => void;
  onEvent: (event: ServerEvent) => void;
  /** Called after a reconnect completes; owner should replay job statuses. */
  onReplayNeeded: () => void;
}

export class EventChannel {
  private socket: WebSocketLike | null = null;
  private closed = false;
  private tracked = new Set<string>();
  private reconnectDelayMs = 250;
  sessionId: string | null = null;

  constructor(
    private readonly url: string,
    private readonly callbacks: ChannelCallbacks,
    private readonly factory: (url: string) => WebSocketLike = (u) =>
      new WebSocket(u) as unknown as WebSocketLike,
  ) {}

  connect(): void {
    const socket = this.factory(this.url);
    this.socket = socket;
    const firstConnection = this.sessionId === null;
    socket.onopen = () => {
      this.reconnectDelayMs = 250;
    };
    socket.onmessage = (message) => {
      let event: ServerEvent;
      try {
        event = JSON.parse(String(message.data)) as ServerEvent;
      } catch {
        return;
      }
      if (event.type === "hello" && event.session_id) {
        this.sessionId = event.session_id;
        this.callbacks.onSession(event.session_id);
        // Re-attach every job we were watching, then replay what we missed.
        for (const jobId of this.tracked) {
          socket.send(JSON.stringify({ type: "subscribe", job_id: jobId }));
        }
        if (!firstConnection) this.callbacks.onReplayNeeded();
        return;
      }
      this.callbacks.onEvent(event);
    };
    socket.onclose = () => {
      if (this.closed) return;
      setTimeout(() => this.connect(), this.reconnectDelayMs);
      this.reconnectDelayMs = Math.min(this.reconnectDelayMs * 2, 5000);
    };
    socket.onerror = () => {
      /* close follows; reconnect handles it */
    };
  }

  track(jobId: string): void {
    this.tracked.add(jobId);
  }

  close(): void {
    this.closed = true;
    this.socket?.close();
  }

  /** Test hook: drop the socket as if the network failed. */
  dropConnection(): void {
    this.socket?.close();
  }
}

/**
 * Worker-protocol client: injects job events into the coordinator's relay
 * port exactly the way a worker node does (4-byte big-endian length prefix
 * + JSON body per frame).
 */

import { Socket, createConnection } from "node:net";

export interface WireEvent {
  type: string;
  job_id: string;
  task: number | null;
  seq: number;
  payload: string;
  attempt?: number;
}

export class RelayInjector {
  private socket: Socket;
  private buffer = Buffer.alloc(0);
  private waiters: Array<(body: Record<string, unknown>) => void> = [];

  private constructor(socket: Socket) {
    this.socket = socket;
    socket.on("data", (chunk) => {
      this.buffer = Buffer.concat([this.buffer, chunk]);
      while (this.buffer.length >= 4) {
        const length = this.buffer.readUInt32BE(0);
        if (this.buffer.length < 4 + length) break;
        const body = JSON.parse(this.buffer.subarray(4, 4 + length).toString());
        this.buffer = this.buffer.subarray(4 + length);
        this.waiters.shift()?.(body);
      }
    });
  }

  static connect(host: string, port: number): Promise<RelayInjector> {
    return new Promise((resolve, reject) => {
      const socket = createConnection({ host, port }, () =>
        resolve(new RelayInjector(socket)));
      socket.once("error", reject);
    });
  }

  emit(sessionId: string, event: WireEvent): Promise<Record<string, unknown>> {
    const frame = Buffer.from(JSON.stringify({
      op: "emit",
      session_id: sessionId,
      event: { attempt: 1, ...event },
    }));
    const header = Buffer.alloc(4);
    header.writeUInt32BE(frame.length);
    const response = new Promise<Record<string, unknown>>((resolve) =>
      this.waiters.push(resolve));
    this.socket.write(Buffer.concat([header, frame]));
    return response;
  }

  close(): void {
    this.socket.destroy();
  }
}

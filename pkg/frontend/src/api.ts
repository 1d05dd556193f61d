/** Thin fetch client for the annotation service; fetch is injectable so the
 * poll logic can be tested without a server. */

import type { PendingTask, RunStatus, SubmitResult } from "./types.js";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  async pending(): Promise<PendingTask | null> {
    const resp = await this.fetchFn(`${this.base}/api/pending`);
    if (resp.status === 204) return null;
    if (!resp.ok) throw new Error(`pending: HTTP ${resp.status}`);
    return (await resp.json()) as PendingTask;
  }

  async submitLabel(taskId: string, label: number): Promise<SubmitResult> {
    const resp = await this.fetchFn(`${this.base}/api/label`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ task_id: taskId, label }),
    });
    if (resp.ok) return "ok";
    if (resp.status === 409) return "stale";
    if (resp.status === 422) return "invalid";
    throw new Error(`label: HTTP ${resp.status}`);
  }

  async status(): Promise<RunStatus> {
    const resp = await this.fetchFn(`${this.base}/api/status`);
    if (!resp.ok) throw new Error(`status: HTTP ${resp.status}`);
    return (await resp.json()) as RunStatus;
  }

  async classes(): Promise<string[]> {
    const resp = await this.fetchFn(`${this.base}/api/classes`);
    if (!resp.ok) throw new Error(`classes: HTTP ${resp.status}`);
    const body = (await resp.json()) as { classes: string[] };
    return body.classes;
  }
}

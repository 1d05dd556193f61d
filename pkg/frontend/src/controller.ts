/** Poll-loop state machine behind the console.
 *
 * Keeps exactly one pending task in view, guards against double submission,
 * surfaces stale-task (409) outcomes as an "expired, fallback used" notice,
 * and flips to an offline state on network errors, resuming automatically on
 * the next successful poll. All state is rebuilt from the API, so a page
 * reload loses nothing.
 */

import type { ApiClient } from "./api.js";
import type { PendingTask, RunStatus } from "./types.js";

export type ViewState =
  | { kind: "connecting" }
  | { kind: "offline" }
  | { kind: "idle"; status: RunStatus | null; notice: string | null }
  | {
      kind: "task";
      task: PendingTask;
      status: RunStatus | null;
      submitting: boolean;
      notice: string | null;
    };

export interface ControllerOptions {
  pollMs?: number;
  now?: () => number; // epoch seconds
  onChange?: (state: ViewState) => void;
}

export const DEFAULT_POLL_MS = 400; // spec budget: at most 500 ms

/** Map a keyboard key to a class id: digits 0-9 address the first ten. */
export function keyToLabel(key: string, classCount: number): number | null {
  if (!/^[0-9]$/.test(key)) return null;
  const label = Number(key);
  return label < classCount ? label : null;
}

export class Controller {
  private state: ViewState = { kind: "connecting" };
  private timer: ReturnType<typeof setInterval> | null = null;
  private notice: string | null = null;
  private submitting = false;
  private readonly pollMs: number;
  private readonly now: () => number;
  private readonly onChange: (state: ViewState) => void;

  constructor(private readonly api: ApiClient, opts: ControllerOptions = {}) {
    this.pollMs = opts.pollMs ?? DEFAULT_POLL_MS;
    this.now = opts.now ?? (() => Date.now() / 1000);
    this.onChange = opts.onChange ?? (() => undefined);
    if (this.pollMs > 500) throw new Error("poll interval must be <= 500 ms");
  }

  getState(): ViewState {
    return this.state;
  }

  start(): void {
    if (this.timer !== null) return;
    void this.tick();
    this.timer = setInterval(() => void this.tick(), this.pollMs);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  /** One poll cycle; exposed so tests can drive the loop deterministically. */
  async tick(): Promise<void> {
    let task: PendingTask | null;
    let status: RunStatus | null;
    try {
      [task, status] = await Promise.all([this.api.pending(), this.api.status()]);
    } catch {
      this.setState({ kind: "offline" });
      return;
    }
    if (task === null) {
      this.submitting = false;
      this.setState({ kind: "idle", status, notice: this.notice });
      return;
    }
    const current = this.state;
    const sameTask =
      current.kind === "task" && current.task.task_id === task.task_id;
    if (!sameTask) {
      // a new task supersedes any notice from the previous one
      this.submitting = false;
      this.notice = null;
    }
    this.setState({
      kind: "task",
      task,
      status,
      submitting: this.submitting,
      notice: this.notice,
    });
  }

  /** Submit a label for the task in view. Re-entrant calls and calls outside
   * the task state are ignored, so a double-click sends one POST. */
  async submit(label: number): Promise<void> {
    const current = this.state;
    if (current.kind !== "task" || this.submitting) return;
    this.submitting = true;
    this.setState({ ...current, submitting: true });
    let outcome: "ok" | "stale" | "invalid";
    try {
      outcome = await this.api.submitLabel(current.task.task_id, label);
    } catch {
      this.submitting = false;
      this.setState({ kind: "offline" });
      return;
    }
    this.submitting = false;
    if (outcome === "ok") {
      this.notice = null;
      this.setState({ kind: "idle", status: null, notice: null });
    } else if (outcome === "stale") {
      this.notice = "task expired; the run used its fallback label";
      this.setState({ kind: "idle", status: null, notice: this.notice });
    } else {
      this.notice = "label rejected by the server (out of range)";
      this.setState({ ...current, submitting: false, notice: this.notice });
    }
    await this.tick();
  }

  /** Seconds until the pending task's deadline (negative when past). */
  countdownSeconds(): number | null {
    if (this.state.kind !== "task") return null;
    return this.state.task.deadline - this.now();
  }

  private setState(state: ViewState): void {
    this.state = state;
    this.onChange(state);
  }
}

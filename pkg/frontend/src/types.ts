/** Payload shapes served by the annotation service. */

export interface ScatterContext {
  /** [x, y, pseudo_label] for every sample in the current batch. */
  points: [number, number, number][];
  /** Coordinates of the sample awaiting a label. */
  pending: [number, number];
}

export interface PendingTask {
  task_id: string;
  features: number[];
  class_names: string[];
  pseudo_label: number | null;
  image_png_b64: string | null;
  context: ScatterContext | null;
  issued_at: number;
  deadline: number; // epoch seconds
}

export interface RunStatus {
  batch_index: number;
  domains_done: number;
  running_error: number | null;
  gamma_tail: [number, number][];
  annotations: number;
  fallbacks: number;
}

export type SubmitResult = "ok" | "stale" | "invalid";

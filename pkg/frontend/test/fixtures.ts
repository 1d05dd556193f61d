import type { PendingTask } from "../src/types.js";

export function makeTask(overrides: Partial<PendingTask> = {}): PendingTask {
  return {
    task_id: "task-00001",
    features: [0.1, -0.4],
    class_names: ["a", "b", "c"],
    pseudo_label: 1,
    image_png_b64: null,
    context: {
      points: [[0, 0, 0], [1, 1, 1]],
      pending: [0.5, 0.5],
    },
    issued_at: 1000,
    deadline: 1030,
    ...overrides,
  };
}

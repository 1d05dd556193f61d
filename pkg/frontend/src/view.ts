/** DOM rendering: pending sample (image or 2-D scatter), class buttons,
 * countdown, status bar with a weight sparkline. */

import type { Controller, ViewState } from "./controller.js";
import { keyToLabel } from "./controller.js";
import type { RunStatus, ScatterContext } from "./types.js";

const CLASS_COLORS = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#b07aa1",
                      "#76b7b2", "#edc948", "#ff9da7", "#9c755f", "#bab0ac"];

export class View {
  private readonly root: HTMLElement;
  private controller: Controller | null = null;
  private countdownTimer: ReturnType<typeof setInterval> | null = null;

  constructor(root: HTMLElement) {
    this.root = root;
    document.addEventListener("keydown", (ev) => this.onKey(ev));
  }

  attach(controller: Controller): void {
    this.controller = controller;
  }

  private onKey(ev: KeyboardEvent): void {
    const state = this.controller?.getState();
    if (!this.controller || !state || state.kind !== "task") return;
    const label = keyToLabel(ev.key, state.task.class_names.length);
    if (label !== null) void this.controller.submit(label);
  }

  render(state: ViewState): void {
    if (this.countdownTimer !== null) {
      clearInterval(this.countdownTimer);
      this.countdownTimer = null;
    }
    this.root.replaceChildren();
    if (state.kind === "connecting") {
      this.banner("connecting to the run...");
      return;
    }
    if (state.kind === "offline") {
      this.banner("connection lost - retrying automatically", "warn");
      return;
    }
    if (state.notice) this.banner(state.notice, "notice");
    if (state.kind === "idle") {
      const idle = document.createElement("p");
      idle.className = "idle";
      idle.textContent = "no sample awaiting annotation";
      this.root.appendChild(idle);
    } else {
      this.renderTask(state);
    }
    if (state.status) this.renderStatus(state.status);
  }

  private banner(text: string, cls = ""): void {
    const div = document.createElement("div");
    div.className = `banner ${cls}`;
    div.textContent = text;
    this.root.appendChild(div);
  }

  private renderTask(state: Extract<ViewState, { kind: "task" }>): void {
    const { task, submitting } = state;
    const panel = document.createElement("div");
    panel.className = "task";

    const head = document.createElement("div");
    head.className = "task-head";
    const title = document.createElement("span");
    title.textContent = `sample ${task.task_id}`;
    const countdown = document.createElement("span");
    countdown.className = "countdown";
    head.append(title, countdown);
    panel.appendChild(head);

    const show = () => {
      const left = this.controller?.countdownSeconds();
      countdown.textContent = left === null || left === undefined
        ? "" : `${Math.max(0, left).toFixed(0)}s left`;
    };
    show();
    this.countdownTimer = setInterval(show, 1000);

    if (task.image_png_b64) {
      const img = document.createElement("img");
      img.className = "sample-image";
      img.src = `data:image/png;base64,${task.image_png_b64}`;
      panel.appendChild(img);
    } else if (task.context) {
      panel.appendChild(this.scatter(task.context));
    } else {
      const feats = document.createElement("code");
      feats.textContent = `x = [${task.features.map((v) => v.toFixed(3)).join(", ")}]`;
      panel.appendChild(feats);
    }

    if (task.pseudo_label !== null) {
      const hint = document.createElement("p");
      hint.className = "hint";
      hint.textContent = `model guess: ${task.class_names[task.pseudo_label]}`;
      panel.appendChild(hint);
    }

    const buttons = document.createElement("div");
    buttons.className = "buttons";
    task.class_names.forEach((name, label) => {
      const btn = document.createElement("button");
      btn.textContent = label < 10 ? `${name} [${label}]` : name;
      btn.disabled = submitting;
      btn.addEventListener("click", () => void this.controller?.submit(label));
      buttons.appendChild(btn);
    });
    panel.appendChild(buttons);
    this.root.appendChild(panel);
  }

  private scatter(context: ScatterContext): HTMLCanvasElement {
    const canvas = document.createElement("canvas");
    canvas.width = 360;
    canvas.height = 360;
    canvas.className = "scatter";
    const ctx = canvas.getContext("2d");
    if (!ctx) return canvas;
    const xs = context.points.map((p) => p[0]).concat([context.pending[0]]);
    const ys = context.points.map((p) => p[1]).concat([context.pending[1]]);
    const pad = 20;
    const min = [Math.min(...xs), Math.min(...ys)];
    const max = [Math.max(...xs), Math.max(...ys)];
    const sx = (v: number) =>
      pad + ((v - min[0]) / (max[0] - min[0] || 1)) * (canvas.width - 2 * pad);
    const sy = (v: number) =>
      canvas.height - pad - ((v - min[1]) / (max[1] - min[1] || 1)) * (canvas.height - 2 * pad);
    for (const [x, y, label] of context.points) {
      ctx.fillStyle = CLASS_COLORS[label % CLASS_COLORS.length];
      ctx.beginPath();
      ctx.arc(sx(x), sy(y), 4, 0, 2 * Math.PI);
      ctx.fill();
    }
    ctx.strokeStyle = "#111";
    ctx.lineWidth = 2.5;
    ctx.beginPath();
    ctx.arc(sx(context.pending[0]), sy(context.pending[1]), 9, 0, 2 * Math.PI);
    ctx.stroke();
    return canvas;
  }

  private renderStatus(status: RunStatus): void {
    const bar = document.createElement("div");
    bar.className = "status";
    const err = status.running_error === null
      ? "n/a" : `${(100 * status.running_error).toFixed(1)}%`;
    const text = document.createElement("span");
    text.textContent = `batch ${status.batch_index} | domain ${status.domains_done} | ` +
      `running error ${err} | ${status.annotations} annotated, ` +
      `${status.fallbacks} fallbacks`;
    bar.appendChild(text);
    bar.appendChild(this.sparkline(status.gamma_tail));
    this.root.appendChild(bar);
  }

  private sparkline(tail: [number, number][]): HTMLCanvasElement {
    const canvas = document.createElement("canvas");
    canvas.width = 120;
    canvas.height = 28;
    canvas.className = "sparkline";
    const ctx = canvas.getContext("2d");
    if (!ctx || tail.length === 0) return canvas;
    const draw = (series: number[], color: string) => {
      ctx.strokeStyle = color;
      ctx.beginPath();
      series.forEach((v, i) => {
        const x = (i / Math.max(1, series.length - 1)) * canvas.width;
        const y = canvas.height - (v / 2) * canvas.height; // weights live in [0, 2]
        if (i === 0) ctx.moveTo(x, y);
        else ctx.lineTo(x, y);
      });
      ctx.stroke();
    };
    draw(tail.map((g) => g[0]), "#e15759");
    draw(tail.map((g) => g[1]), "#4e79a7");
    return canvas;
  }
}

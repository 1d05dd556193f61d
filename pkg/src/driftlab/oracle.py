"""Label sources for selected samples.

Four kinds: ground truth, noisy ground truth (wrong with probability p), a
separately pretrained stronger "annotator" model, and a live human answering
through the annotation service. Human annotation flows through a single-slot
exchange: the engine blocks on a task until a reply arrives or the deadline
passes, in which case the configured fallback labels the sample and the step
is tagged so human-mode metrics can exclude it.
"""

from __future__ import annotations

import base64
import io
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .model import forward
from .selection import PredictionSet
from .snapshots import Snapshot, load as load_snapshot
from .stream import Batch, Dataset, ImagePayload, SourceSpec, make_source_dataset

ORACLE_KINDS = ("ground_truth", "noisy", "model", "human")


class OracleError(RuntimeError):
    pass


@dataclass
class OracleConfig:
    kind: str = "ground_truth"
    noise_p: float = 0.0
    snapshot_path: str | None = None
    timeout_s: float = 30.0
    fallback: str | None = "ground_truth"
    show_pseudo_hint: bool = True
    class_names: list[str] | None = None

    def __post_init__(self):
        if self.kind not in ORACLE_KINDS:
            raise OracleError(f"unknown oracle kind {self.kind!r}")
        if not 0.0 <= self.noise_p <= 1.0:
            raise OracleError(f"noise_p must lie in [0, 1], got {self.noise_p}")
        if self.kind == "model" and not self.snapshot_path:
            raise OracleError("model oracle needs a snapshot path")
        if self.kind == "human" and self.fallback == "human":
            raise OracleError("human fallback must be a non-human kind")


@dataclass
class AnnotationTask:
    task_id: str
    features: list[float]
    class_names: list[str]
    pseudo_label: int | None
    image_png_b64: str | None
    context: dict | None           # 2-D scatter of the batch when dim == 2
    issued_at: float
    deadline: float                # wall-clock epoch seconds


class AnnotationExchange:
    """Single-slot handoff between the engine and the annotation service.

    Exactly one task is outstanding at a time; late or duplicate submissions
    are rejected so the service can answer 409.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._task: AnnotationTask | None = None
        self._reply: int | None = None

    def request(self, task: AnnotationTask, timeout_s: float) -> int | None:
        """Publish a task and block until a label arrives or time runs out."""
        with self._cond:
            self._task = task
            self._reply = None
            self._cond.notify_all()
            deadline = time.monotonic() + timeout_s
            while self._reply is None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._cond.wait(remaining)
            label = self._reply
            self._task = None
            self._reply = None
            return label

    def pending(self) -> AnnotationTask | None:
        with self._cond:
            return self._task

    def submit(self, task_id: str, label: int) -> bool:
        """True if the label was accepted for the currently pending task."""
        with self._cond:
            if (self._task is None or self._task.task_id != task_id
                    or self._reply is not None):
                return False
            self._reply = int(label)
            self._cond.notify_all()
            return True


def png_base64(img: ImagePayload) -> str:
    from PIL import Image
    im = Image.frombytes("L", (img.width, img.height), img.data)
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class Oracle:
    """Resolves annotation requests to (label, source_tag)."""

    def __init__(self, config: OracleConfig, classes: int, master_seed: int,
                 exchange: AnnotationExchange | None = None):
        self.cfg = config
        self.classes = classes
        self.seed = master_seed
        self.exchange = exchange
        self.class_names = config.class_names or [f"class_{c}" for c in range(classes)]
        self._task_counter = 0
        self._annotator = None
        if config.kind == "model":
            self._annotator = load_snapshot(config.snapshot_path).model
        if config.kind == "human" and exchange is None:
            raise OracleError("human oracle requires a running annotation service")
        self._fallback: Oracle | None = None
        if config.kind == "human" and config.fallback is not None:
            fb_cfg = OracleConfig(kind=config.fallback, noise_p=config.noise_p,
                                  snapshot_path=config.snapshot_path,
                                  class_names=config.class_names)
            self._fallback = Oracle(fb_cfg, classes, master_seed)

    def annotate(self, x: np.ndarray, true_label: int, pseudo_label: int,
                 step: int, index: int, batch: Batch | None = None,
                 preds: PredictionSet | None = None) -> tuple[int | None, str]:
        kind = self.cfg.kind
        if kind == "ground_truth":
            return true_label, "ground_truth"
        if kind == "noisy":
            gen = rng.substream(self.seed, rng.ORACLE, step, index)
            if gen.random() < self.cfg.noise_p:
                wrong = int(gen.integers(self.classes - 1))
                if wrong >= true_label:
                    wrong += 1
                return wrong, "noisy"
            return true_label, "noisy"
        if kind == "model":
            cache = forward(self._annotator, np.asarray(x)[None, :], mode="source")
            return int(np.argmax(cache.logits[0])), "model"
        # human
        task = self._build_task(x, pseudo_label, index, batch, preds)
        label = self.exchange.request(task, self.cfg.timeout_s)
        if label is not None:
            return int(label), "human"
        if self._fallback is None:
            return None, "none"
        fb_label, _ = self._fallback.annotate(x, true_label, pseudo_label, step, index)
        return fb_label, f"fallback:{self.cfg.fallback}"

    def _build_task(self, x, pseudo_label, index, batch, preds) -> AnnotationTask:
        self._task_counter += 1
        now = time.time()
        image = None
        context = None
        x = np.asarray(x, dtype=np.float64)
        if batch is not None:
            if batch.imgs is not None and batch.imgs[index] is not None:
                image = png_base64(batch.imgs[index])
            if batch.x.shape[1] == 2 and preds is not None:
                context = {
                    "points": [[float(a), float(b), int(p)] for (a, b), p in
                               zip(batch.x, preds.pseudo_labels)],
                    "pending": [float(x[0]), float(x[1])],
                }
        return AnnotationTask(
            task_id=f"task-{self._task_counter:05d}",
            features=[float(v) for v in x],
            class_names=self.class_names,
            pseudo_label=int(pseudo_label) if self.cfg.show_pseudo_hint else None,
            image_png_b64=image,
            context=context,
            issued_at=now,
            deadline=now + self.cfg.timeout_s,
        )


def train_annotator(source: SourceSpec, seed: int, hidden: tuple[int, ...] = (64, 64),
                    epochs: int = 60, lr: float = 0.03,
                    noise_levels: tuple[float, ...] = (0.0, 0.3, 0.6)) -> tuple[Snapshot, float]:
    """Pretrain the stronger desk annotator: a wider/deeper net fit on the
    clean source plus mildly noise-corrupted copies. Returns the snapshot and
    its holdout accuracy on the clean source, so runs can report how good the
    label source itself is."""
    from .model import ArchSpec, OptimizerState, init_model
    from .stream import pretrain_source, split_dataset, evaluate_accuracy

    ds = make_source_dataset(source, seed)
    gen = rng.substream(seed, rng.ORACLE, 0)
    xs = [ds.x + gen.standard_normal(ds.x.shape) * lv for lv in noise_levels]
    augmented = Dataset(x=np.concatenate(xs), y=np.tile(ds.y, len(noise_levels)))
    train, holdout = split_dataset(augmented, holdout_frac=0.2, seed=seed)

    arch = ArchSpec(source.dim, hidden, source.classes)
    m = init_model(arch, seed=seed + 1)
    opt = OptimizerState(kind="sgd", lr=lr, momentum=0.9)
    pretrain_source(m, train, epochs=epochs, opt=opt, seed=seed + 2)
    acc = evaluate_accuracy(m, holdout.x, holdout.y, mode="source")
    return Snapshot.take(m), acc

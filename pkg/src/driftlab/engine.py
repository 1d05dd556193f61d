"""Per-batch adaptation step and the episode runner.

One step: predict on the incoming batch (batch statistics), pick and annotate
up to the budgeted number of samples, build the supervised (cross-entropy
over annotated + replayed items) and unsupervised (mean entropy over
confident unannotated samples) losses, debias their gradients by norm,
smooth the weights with EMA, and apply one optimizer update to the norm
affine parameters.

The combined forward over [batch; replay] is the gradient graph for both
loss terms; the batch-only forward from the predict stage is the prediction
of record for metrics and selection. With the buffer disabled the two
coincide.

Episodes run in "ctta" mode (state persists across domain boundaries) or
"ftta" mode (source snapshot, fresh optimizer, unit debias weights, empty
history and buffer restored at every boundary).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics, rng
from .model import LossSpec, ModelError, ModelState, NonFiniteGradient, \
    OptimizerState, backward, forward, loss_value_and_dlogits, optimizer_step, softmax
from .oracle import Oracle
from .selection import AnnotationBudget, SelectionState, confidence_diff, confident_mask, \
    predictions_from_probs, select_baseline, select_for_annotation, update_history
from .snapshots import Snapshot
from .stream import DOMAIN_BOUNDARY, END_OF_EPISODE, Batch, EpisodeStream

NORM_FLOOR = 1e-12


class EpisodeAborted(RuntimeError):
    def __init__(self, reason: str, report):
        super().__init__(reason)
        self.report = report


@dataclass
class GradientBundle:
    grad_sup: np.ndarray
    grad_unsup: np.ndarray

    @property
    def norm_sup(self) -> float:
        return float(np.linalg.norm(self.grad_sup))

    @property
    def norm_unsup(self) -> float:
        return float(np.linalg.norm(self.grad_unsup))


def debias_weights(norm_sup: float, norm_unsup: float) -> tuple[float, float]:
    """Raw dynamic weights: each loss is scaled by the opposite gradient's
    share, summing to exactly 2; degenerate norms fall back to (1, 1)."""
    if norm_sup < 0 or norm_unsup < 0:
        raise ValueError("gradient norms must be nonnegative")
    if norm_sup <= NORM_FLOOR or norm_unsup <= NORM_FLOOR:
        return 1.0, 1.0
    denom = norm_sup + norm_unsup
    return 2.0 * norm_unsup / denom, 2.0 * norm_sup / denom


@dataclass
class DebiasState:
    gamma1: float = 1.0
    gamma2: float = 1.0
    alpha: float = 0.8
    use_gnd: bool = True
    use_ema: bool = True
    last_raw: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")


def ema_update(state: DebiasState, raw: tuple[float, float]) -> None:
    """gamma_i <- alpha * gamma_i + (1 - alpha) * raw_i, in place."""
    a = state.alpha
    state.gamma1 = a * state.gamma1 + (1.0 - a) * raw[0]
    state.gamma2 = a * state.gamma2 + (1.0 - a) * raw[1]


@dataclass
class ReplayBuffer:
    """FIFO of annotated (features, oracle label, domain) triples."""

    capacity: int = 0
    draw_size: int = 32
    items: list[tuple[np.ndarray, int, int]] = field(default_factory=list)

    def push(self, x: np.ndarray, label: int, domain_id: int) -> None:
        if self.capacity <= 0:
            return
        self.items.append((np.array(x, dtype=np.float64), int(label), int(domain_id)))
        if len(self.items) > self.capacity:
            del self.items[: len(self.items) - self.capacity]

    def draw(self, gen: np.random.Generator) -> list[tuple[np.ndarray, int, int]]:
        """min(draw_size, size) distinct items, uniform without replacement."""
        n = len(self.items)
        if n == 0 or self.draw_size <= 0:
            return []
        k = min(self.draw_size, n)
        idx = gen.choice(n, size=k, replace=False)
        return [self.items[i] for i in idx]

    def clear(self) -> None:
        self.items.clear()

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class ChosenSample:
    index: int
    pseudo_label: int
    true_label: int
    oracle_label: int
    source: str
    diff: float
    entropy: float
    balance_rule_fired: bool


@dataclass
class StepReport:
    step: int
    domain_id: int
    domain_name: str
    batch_size: int
    error_count: int                      # from PRE-update predictions
    confident_count: int
    chosen: list[ChosenSample]
    diffs: np.ndarray | None              # per-sample scores on scored batches
    n_sup: int
    n_unsup: int
    l_sup: float
    l_unsup: float
    norm_sup: float
    norm_unsup: float
    gamma_raw: tuple[float, float]
    gamma: tuple[float, float]
    class_correct: np.ndarray             # per-class correct predictions
    class_total: np.ndarray               # per-class occurrences
    stepped: bool = True
    abort_reason: str | None = None
    annotated_indices: list[int] = field(default_factory=list)
    unsup_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))


@dataclass
class EngineConfig:
    classes: int
    strategy: str = "ours"
    use_pd: bool = True
    use_cb: bool = True
    use_gnd: bool = True
    use_ema: bool = True
    sigma: float = 0.01
    mu: float = 0.0
    diff_draws: int = 1
    history_k: int = 5
    budget: AnnotationBudget = field(default_factory=AnnotationBudget)
    alpha: float = 0.8
    threshold_factor: float = 0.4
    buffer_size: int = 0
    replay_draw: int = 32
    optimizer: str = "sgd"
    lr: float = 0.005
    momentum: float = 0.9
    idle_unsup_weight: str = "carried"    # carried | one
    source_norm_mode: str = "source"      # no-adaptation baseline forward mode


class AdaptationEngine:
    """Single-owner state machine running one adaptation episode."""

    def __init__(self, source_snapshot: Snapshot, config: EngineConfig,
                 oracle: Oracle, master_seed: int):
        self.source_snapshot = source_snapshot
        self.cfg = config
        self.oracle = oracle
        self.seed = master_seed
        self.model: ModelState = source_snapshot.model.copy()
        self.opt = self._fresh_optimizer()
        self.selection = self._fresh_selection()
        self.debias = self._fresh_debias()
        self.buffer = ReplayBuffer(capacity=config.buffer_size,
                                   draw_size=config.replay_draw)
        self.step_counter = 0
        self._current_domain: int | None = None
        self._step_in_domain = 0
        self.status: dict = {"batch_index": 0, "domains_done": 0,
                             "running_error": None, "gamma_tail": [],
                             "annotations": 0, "fallbacks": 0}
        self._error_sum = 0
        self._sample_sum = 0
        self._gamma_tail: list[tuple[float, float]] = []
        self._annotations = 0

    def _fresh_optimizer(self) -> OptimizerState:
        return OptimizerState(kind=self.cfg.optimizer, lr=self.cfg.lr,
                              momentum=self.cfg.momentum)

    def _fresh_selection(self) -> SelectionState:
        return SelectionState(sigma=self.cfg.sigma, mu=self.cfg.mu,
                              diff_draws=self.cfg.diff_draws,
                              history_k=self.cfg.history_k, budget=self.cfg.budget)

    def _fresh_debias(self) -> DebiasState:
        return DebiasState(alpha=self.cfg.alpha, use_gnd=self.cfg.use_gnd,
                           use_ema=self.cfg.use_ema)

    def restore_source(self) -> None:
        """FTTA reset at a domain boundary: source parameters, fresh optimizer
        and debias weights, empty history and buffer."""
        self.model, _ = self.source_snapshot.restore()
        self.opt = self._fresh_optimizer()
        self.selection = self._fresh_selection()
        self.debias = self._fresh_debias()
        self.buffer.clear()

    # --- one batch ---------------------------------------------------------

    def adapt_step(self, batch: Batch) -> StepReport:
        step = self.step_counter
        self.step_counter += 1
        # Substreams are keyed by position WITHIN the domain so repeated
        # domains replay identically under an FTTA reset.
        if batch.domain_id != self._current_domain:
            self._current_domain = batch.domain_id
            self._step_in_domain = 0
        key = self._step_in_domain
        self._step_in_domain += 1

        if self.cfg.strategy == "source":
            return self._no_adapt_step(batch, step)
        try:
            return self._adapt_step_inner(batch, step, key)
        except (ModelError, NonFiniteGradient) as exc:
            return self._numeric_abort(batch, step, f"numeric failure: {exc}")

    def _adapt_step_inner(self, batch: Batch, step: int, key: int) -> StepReport:
        cfg = self.cfg

        # (1) predictions of record, pre-update
        cache = forward(self.model, batch.x, mode="batch")
        preds = predictions_from_probs(softmax(cache.logits))
        errors = int(np.sum(preds.pseudo_labels != batch.y))
        conf = confident_mask(preds, cfg.classes, cfg.threshold_factor)
        class_correct = np.zeros(cfg.classes, dtype=np.int64)
        class_total = np.zeros(cfg.classes, dtype=np.int64)
        np.add.at(class_total, batch.y, 1)
        np.add.at(class_correct, batch.y[preds.pseudo_labels == batch.y], 1)

        # (2) selection + annotation under this batch's budget
        n_labels = self.selection.budget.labels_for_batch(self.selection.batch_counter)
        self.selection.batch_counter += 1
        chosen_records: list[ChosenSample] = []
        diffs = None
        annotated_idx: list[int] = []
        annotated_labels: list[int] = []
        if n_labels > 0:
            decision = self._select(key, cache, preds, n_labels)
            diffs = decision.diffs if (cfg.strategy == "ours" and cfg.use_pd) else None
            for pick, fired in zip(decision.chosen, decision.balance_rule_fired):
                label, source = self.oracle.annotate(
                    x=batch.x[pick], true_label=int(batch.y[pick]),
                    pseudo_label=int(preds.pseudo_labels[pick]),
                    step=key, index=pick,
                    batch=batch, preds=preds)
                if label is None:
                    return self._abort_step(batch, step, errors, conf,
                                            class_correct, class_total,
                                            "oracle timeout with no fallback configured")
                annotated_idx.append(pick)
                annotated_labels.append(label)
                self.buffer.push(batch.x[pick], label, batch.domain_id)
                update_history(self.selection, label)
                self._annotations += 1
                chosen_records.append(ChosenSample(
                    index=pick, pseudo_label=int(preds.pseudo_labels[pick]),
                    true_label=int(batch.y[pick]), oracle_label=label,
                    source=source,
                    diff=float(decision.diffs[pick]),
                    entropy=float(preds.entropies[pick]),
                    balance_rule_fired=fired))

        # (3) loss index sets; annotated samples never enter the unsup term
        replay = self.buffer.draw(rng.substream(self.seed, rng.REPLAY, key))
        n = len(batch)
        unsup_idx = np.flatnonzero(conf & ~np.isin(np.arange(n), annotated_idx))
        if replay:
            combined = np.vstack([batch.x] + [r[0][None, :] for r in replay])
            sup_idx = np.array(annotated_idx + list(range(n, n + len(replay))), dtype=np.intp)
            sup_labels = np.array(annotated_labels + [r[1] for r in replay], dtype=np.intp)
            grad_cache = forward(self.model, combined, mode="batch")
        else:
            sup_idx = np.array(annotated_idx, dtype=np.intp)
            sup_labels = np.array(annotated_labels, dtype=np.intp)
            grad_cache = cache

        sup_spec = LossSpec("cross_entropy", sup_idx, sup_labels)
        unsup_spec = LossSpec("entropy", unsup_idx, reduction="sum")
        l_sup, dlog_sup = loss_value_and_dlogits(sup_spec, grad_cache.logits)
        l_unsup, dlog_unsup = loss_value_and_dlogits(unsup_spec, grad_cache.logits)
        if not (np.isfinite(l_sup) and np.isfinite(l_unsup)):
            return self._abort_step(batch, step, errors, conf, class_correct,
                                    class_total, "non-finite loss")

        # (4) two backward passes over the trainable parameters
        bundle = GradientBundle(
            grad_sup=backward(self.model, grad_cache, dlog_sup, wrt="trainable"),
            grad_unsup=backward(self.model, grad_cache, dlog_unsup, wrt="trainable"))
        norm_sup, norm_unsup = bundle.norm_sup, bundle.norm_unsup

        # (5)+(6) dynamic weights: raw from gradient norms, then EMA
        n_sup = int(sup_idx.size)
        if n_sup > 0:
            raw = debias_weights(norm_sup, norm_unsup) if self.debias.use_gnd else (1.0, 1.0)
            if self.debias.use_ema:
                ema_update(self.debias, raw)
            else:
                self.debias.gamma1, self.debias.gamma2 = raw
            self.debias.last_raw = raw
            gamma1, gamma2 = self.debias.gamma1, self.debias.gamma2
        else:
            raw = self.debias.last_raw
            gamma1 = self.debias.gamma1
            gamma2 = self.debias.gamma2 if cfg.idle_unsup_weight == "carried" else 1.0

        # (7) combined update; skip entirely when both terms are empty
        stepped = False
        if n_sup > 0 or unsup_idx.size > 0:
            grad = gamma1 * bundle.grad_sup + gamma2 * bundle.grad_unsup
            optimizer_step(self.model, self.opt, grad)
            stepped = True

        report = StepReport(
            step=step, domain_id=batch.domain_id, domain_name=batch.domain_name,
            batch_size=n, error_count=errors,
            confident_count=int(np.sum(conf)), chosen=chosen_records,
            diffs=diffs, n_sup=n_sup, n_unsup=int(unsup_idx.size),
            l_sup=l_sup, l_unsup=l_unsup, norm_sup=norm_sup, norm_unsup=norm_unsup,
            gamma_raw=raw, gamma=(gamma1, gamma2),
            class_correct=class_correct, class_total=class_total, stepped=stepped,
            annotated_indices=annotated_idx, unsup_indices=unsup_idx)
        self._publish(report)
        return report

    def _select(self, step, cache, preds, n_labels):
        cfg = self.cfg
        if cfg.strategy == "ours":
            if cfg.use_pd:
                scores = confidence_diff(self.model, cache, preds, cfg.sigma,
                                         self.seed, step, mu=cfg.mu,
                                         draws=cfg.diff_draws)
            else:
                scores = rng.substream(self.seed, rng.SELECTION, step).random(len(preds))
            return select_for_annotation(scores, preds, self.selection, n_labels,
                                         class_balance=cfg.use_cb)
        gen = rng.substream(self.seed, rng.SELECTION, step)
        return select_baseline(cfg.strategy, preds, n_labels, gen)

    def _no_adapt_step(self, batch: Batch, step: int) -> StepReport:
        cache = forward(self.model, batch.x, mode=self.cfg.source_norm_mode)
        preds = predictions_from_probs(softmax(cache.logits))
        errors = int(np.sum(preds.pseudo_labels != batch.y))
        class_correct = np.zeros(self.cfg.classes, dtype=np.int64)
        class_total = np.zeros(self.cfg.classes, dtype=np.int64)
        np.add.at(class_total, batch.y, 1)
        np.add.at(class_correct, batch.y[preds.pseudo_labels == batch.y], 1)
        report = StepReport(
            step=step, domain_id=batch.domain_id, domain_name=batch.domain_name,
            batch_size=len(batch), error_count=errors,
            confident_count=int(np.sum(confident_mask(preds, self.cfg.classes,
                                                      self.cfg.threshold_factor))),
            chosen=[], diffs=None, n_sup=0, n_unsup=0, l_sup=0.0, l_unsup=0.0,
            norm_sup=0.0, norm_unsup=0.0, gamma_raw=(1.0, 1.0), gamma=(1.0, 1.0),
            class_correct=class_correct, class_total=class_total, stepped=False)
        self._publish(report)
        return report

    def _abort_step(self, batch, step, errors, conf, class_correct, class_total,
                    reason: str) -> StepReport:
        return StepReport(
            step=step, domain_id=batch.domain_id, domain_name=batch.domain_name,
            batch_size=len(batch), error_count=errors,
            confident_count=int(np.sum(conf)), chosen=[], diffs=None,
            n_sup=0, n_unsup=0, l_sup=float("nan"), l_unsup=float("nan"),
            norm_sup=0.0, norm_unsup=0.0,
            gamma_raw=self.debias.last_raw,
            gamma=(self.debias.gamma1, self.debias.gamma2),
            class_correct=class_correct, class_total=class_total,
            stepped=False, abort_reason=reason)

    def _numeric_abort(self, batch, step, reason: str) -> StepReport:
        zeros = np.zeros(self.cfg.classes, dtype=np.int64)
        return self._abort_step(batch, step, errors=0, conf=np.zeros(0, dtype=bool),
                                class_correct=zeros, class_total=zeros.copy(),
                                reason=reason)

    def _publish(self, report: StepReport) -> None:
        self._error_sum += report.error_count
        self._sample_sum += report.batch_size
        self._gamma_tail.append(report.gamma)
        fallbacks = sum(1 for c in report.chosen if c.source.startswith("fallback:"))
        self.status = {
            "batch_index": report.step,
            "domains_done": report.domain_id,
            "running_error": self._error_sum / self._sample_sum,
            "gamma_tail": [list(g) for g in self._gamma_tail[-20:]],
            "annotations": self._annotations,
            "fallbacks": self.status["fallbacks"] + fallbacks,
        }


def run_episode(engine: AdaptationEngine, stream: EpisodeStream,
                config_echo: str = "", raise_on_abort: bool = True):
    """Drive the engine over the stream; FTTA restores at boundaries.

    Returns the finalized RunReport. On an abort the partial report (with the
    aborting StepReport appended) rides on the EpisodeAborted exception.
    """
    acc = metrics.ReportAccumulator(classes=engine.cfg.classes)
    mode = stream.episode.mode
    while True:
        event = stream.next_event()
        if event is END_OF_EPISODE:
            break
        if event is DOMAIN_BOUNDARY:
            if mode == "ftta":
                engine.restore_source()
            continue
        report = engine.adapt_step(event)
        acc.accumulate(report)
        if report.abort_reason is not None:
            partial = acc.finalize(seed=engine.seed, mode=mode,
                                   config_echo=config_echo,
                                   aborted=report.abort_reason)
            if raise_on_abort:
                raise EpisodeAborted(report.abort_reason, partial)
            return partial
    return acc.finalize(seed=engine.seed, mode=mode, config_echo=config_echo)


def reference_entropy_step(model: ModelState, opt: OptimizerState, x: np.ndarray) -> None:
    """Dedicated plain entropy-minimization step (no gating, no annotation,
    no debiasing): the reduction target for configuration-equivalence tests."""
    cache = forward(model, x, mode="batch")
    spec = LossSpec("entropy", np.arange(x.shape[0]), reduction="sum")
    _, dlogits = loss_value_and_dlogits(spec, cache.logits)
    grad = backward(model, cache, dlogits, wrt="trainable")
    optimizer_step(model, opt, grad)

"""Sample scoring and annotation selection.

The proposed criterion perturbs each sample's penultimate features with small
Gaussian noise, re-runs only the classifier head, and scores the absolute
change in confidence on the sample's own pseudo-label. Samples whose
confidence is sensitive to the probe sit between the source and target
distributions and are the ones worth an oracle label. A FIFO of the last K
annotated classes adds a class-balance precedence rule. The uncertainty
baselines (max entropy, least confidence, min margin, random) share the
tie-break and budget mechanics and differ only in the score.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .model import ForwardCache, ModelState, entropy, forward, softmax

STRATEGIES = ("ours", "max_entropy", "least_confidence", "min_margin", "random")


class SelectionError(ValueError):
    pass


@dataclass
class PredictionSet:
    probs: np.ndarray          # (n, C)
    pseudo_labels: np.ndarray  # argmax, lowest index on ties
    entropies: np.ndarray
    confidences: np.ndarray    # p[pseudo_label]

    def __len__(self) -> int:
        return self.probs.shape[0]


def predictions_from_probs(probs: np.ndarray) -> PredictionSet:
    probs = np.asarray(probs, dtype=np.float64)
    pseudo = np.argmax(probs, axis=1)  # np.argmax takes the lowest index on ties
    return PredictionSet(
        probs=probs,
        pseudo_labels=pseudo,
        entropies=np.asarray(entropy(probs)),
        confidences=probs[np.arange(len(probs)), pseudo],
    )


def predict(model: ModelState, x: np.ndarray) -> tuple[PredictionSet, ForwardCache]:
    """Batch-statistics forward plus the derived prediction fields."""
    cache = forward(model, x, mode="batch")
    return predictions_from_probs(softmax(cache.logits)), cache


def confident_mask(preds: PredictionSet, classes: int,
                   threshold_factor: float = 0.4) -> np.ndarray:
    """True where prediction entropy is strictly below factor * ln(classes)."""
    threshold = threshold_factor * np.log(classes)
    return preds.entropies < threshold


def perturbation_noise(master_seed: int, step: int, index: int, draw: int,
                       dim: int) -> np.ndarray:
    """Standard-normal probe for (step, sample, draw); scaled by sigma later
    so sigma=0 gives exact zeros and sweeps reuse the same noise."""
    gen = rng.substream(master_seed, rng.PERTURBATION, step, index, draw)
    return gen.standard_normal(dim)


def confidence_diff(model: ModelState, cache: ForwardCache, preds: PredictionSet,
                    sigma: float, master_seed: int, step: int,
                    mu: float = 0.0, draws: int = 1) -> np.ndarray:
    """|confidence - perturbed confidence| on each sample's pseudo-label.

    Features are reused from ``cache``; only the classifier head is re-run on
    feature + noise. Averages over ``draws`` probes (default one).
    """
    if sigma < 0:
        raise SelectionError("sigma must be nonnegative")
    if len(preds) != cache.features.shape[0]:
        raise SelectionError("predictions do not match the cached forward")
    n, dim = cache.features.shape
    rows = np.arange(n)
    out = np.zeros(n)
    for j in range(draws):
        noise = np.stack([perturbation_noise(master_seed, step, i, j, dim)
                          for i in range(n)])
        feats = cache.features + mu + sigma * noise
        q = softmax(feats @ model.head_weight + model.head_bias)
        out += np.abs(preds.confidences - q[rows, preds.pseudo_labels])
    return out / draws


@dataclass
class AnnotationBudget:
    """Either n labels every batch, or one label every m batches."""

    labels_per_batch: int = 1
    batches_per_label: int = 1

    def __post_init__(self):
        if self.labels_per_batch < 0 or self.batches_per_label < 1:
            raise SelectionError("invalid annotation budget")

    def labels_for_batch(self, batch_counter: int) -> int:
        if self.labels_per_batch == 0:
            return 0
        if batch_counter % self.batches_per_label != 0:
            return 0
        return self.labels_per_batch


@dataclass
class SelectionState:
    sigma: float = 0.01
    mu: float = 0.0
    diff_draws: int = 1
    history_k: int = 5
    budget: AnnotationBudget = field(default_factory=AnnotationBudget)
    history: deque = field(default_factory=deque)
    batch_counter: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise SelectionError("sigma must be nonnegative")
        self.history = deque(self.history, maxlen=self.history_k if self.history_k > 0 else 0)


def update_history(state: SelectionState, oracle_label: int) -> None:
    """FIFO push of an annotated class; oldest entries beyond K fall out."""
    if state.history_k > 0:
        state.history.append(int(oracle_label))


@dataclass
class SelectionDecision:
    chosen: list[int]
    diffs: np.ndarray
    strategy: str
    balance_rule_fired: list[bool] = field(default_factory=list)


def _pick_top(scores: np.ndarray, excluded: set[int]) -> int:
    """Argmax over non-excluded indices; exact ties go to the lowest index."""
    best, best_score = -1, -np.inf
    for i, s in enumerate(scores):
        if i in excluded:
            continue
        if s > best_score:
            best, best_score = i, s
    return best


def select_for_annotation(diffs: np.ndarray, preds: PredictionSet,
                          state: SelectionState, n_labels: int,
                          class_balance: bool = True) -> SelectionDecision:
    """Pick ``n_labels`` samples by diff score with the class-balance rule.

    Precedence: candidates whose pseudo-label is absent from the last-K
    annotated classes win over all others; within a tier the largest diff
    wins, ties to the lowest index. For multi-label batches each pick's
    pseudo-class extends a working view of the history before the next pick;
    the durable history is updated with oracle labels by the engine.
    """
    n = len(preds)
    if n == 0:
        raise SelectionError("empty batch")
    diffs = np.asarray(diffs, dtype=np.float64)
    chosen: list[int] = []
    fired: list[bool] = []
    working = deque(state.history, maxlen=state.history.maxlen)
    excluded: set[int] = set()
    for _ in range(min(n_labels, n)):
        unrestricted = _pick_top(diffs, excluded)
        idx = unrestricted
        if class_balance and len(working) > 0:
            absent = {i for i in range(n)
                      if i not in excluded and preds.pseudo_labels[i] not in working}
            if absent:
                masked = np.where([i in absent for i in range(n)], diffs, -np.inf)
                idx = _pick_top(masked, excluded)
        chosen.append(idx)
        fired.append(idx != unrestricted)
        excluded.add(idx)
        if state.history_k > 0:
            working.append(int(preds.pseudo_labels[idx]))
    return SelectionDecision(chosen=chosen, diffs=diffs, strategy="ours",
                             balance_rule_fired=fired)


def baseline_scores(strategy: str, preds: PredictionSet,
                    gen: np.random.Generator) -> np.ndarray:
    if strategy == "max_entropy":
        return preds.entropies.copy()
    if strategy == "least_confidence":
        return -preds.confidences
    if strategy == "min_margin":
        part = np.sort(preds.probs, axis=1)
        return -(part[:, -1] - part[:, -2])
    if strategy == "random":
        return gen.random(len(preds))
    raise SelectionError(f"unknown strategy {strategy!r}")


def select_baseline(strategy: str, preds: PredictionSet, n_labels: int,
                    gen: np.random.Generator) -> SelectionDecision:
    """Uncertainty/random baselines; same tie-break and budget mechanics as
    the proposed picker, no class-balance rule."""
    n = len(preds)
    if n == 0:
        raise SelectionError("empty batch")
    scores = baseline_scores(strategy, preds, gen)
    chosen: list[int] = []
    excluded: set[int] = set()
    for _ in range(min(n_labels, n)):
        idx = _pick_top(scores, excluded)
        chosen.append(idx)
        excluded.add(idx)
    return SelectionDecision(chosen=chosen, diffs=scores, strategy=strategy,
                             balance_rule_fired=[False] * len(chosen))

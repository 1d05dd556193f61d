"""Differentiable MLP classifier with batch-statistics normalization.

The architecture is fixed: (dense -> norm -> ReLU) x k hidden blocks feeding
a dense classifier head. The norm layers carry per-feature scale/shift
parameters; those affine parameters are the only ones trained during online
adaptation, while full-parameter gradients remain available for source
pretraining. Reverse mode is hand-derived for this graph, in float64, with
gradients flowing through the batch mean/variance (no stop-gradient).

Conventions:
* ``mode="batch"``  -- normalize with the current batch's mean/variance.
* ``mode="source"`` -- normalize with the recorded running statistics.
* Trainable vector layout: scale_0, shift_0, scale_1, shift_1, ...
* Full vector layout: per block W, b, scale, shift; then classifier W, b.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng

NORM_EPS_DEFAULT = 1e-5
_PROB_FLOOR = 1e-12


class ModelError(ValueError):
    """Invalid architecture, shape mismatch, or stale cache."""


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int
    hidden: tuple[int, ...]
    classes: int

    def __post_init__(self):
        if self.input_dim < 1:
            raise ModelError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.classes < 2:
            raise ModelError(f"need at least 2 classes, got {self.classes}")
        if any(w < 1 for w in self.hidden):
            raise ModelError(f"zero or negative hidden width in {self.hidden}")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))


@dataclass
class ModelState:
    """All parameters plus the recorded source running statistics.

    ``version`` increments on every parameter mutation so a ForwardCache can
    detect that it has gone stale.
    """

    arch: ArchSpec
    weights: list[np.ndarray]          # per block, (fan_in, width)
    biases: list[np.ndarray]           # per block, (width,)
    scales: list[np.ndarray]           # per block, (width,)
    shifts: list[np.ndarray]           # per block, (width,)
    head_weight: np.ndarray            # (feat_dim, classes)
    head_bias: np.ndarray              # (classes,)
    running_mean: list[np.ndarray]     # per block, (width,)
    running_var: list[np.ndarray]      # per block, (width,)
    norm_eps: float = NORM_EPS_DEFAULT
    version: int = 0

    @property
    def feature_dim(self) -> int:
        return self.arch.hidden[-1] if self.arch.hidden else self.arch.input_dim

    def bump(self) -> None:
        self.version += 1

    # --- flat parameter views -------------------------------------------

    def trainable_vector(self) -> np.ndarray:
        """Flat copy of the norm scale/shift parameters (the adaptation set)."""
        parts = []
        for s, b in zip(self.scales, self.shifts):
            parts.extend((s, b))
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)

    def set_trainable_vector(self, vec: np.ndarray) -> None:
        expected = self.num_trainable()
        if vec.shape != (expected,):
            raise ModelError(f"trainable vector length {vec.shape} != ({expected},)")
        off = 0
        for i, w in enumerate(self.arch.hidden):
            self.scales[i] = vec[off:off + w].copy()
            off += w
            self.shifts[i] = vec[off:off + w].copy()
            off += w
        self.bump()

    def num_trainable(self) -> int:
        return 2 * sum(self.arch.hidden)

    def full_vector(self) -> np.ndarray:
        parts = []
        for i in range(len(self.arch.hidden)):
            parts.extend((self.weights[i].ravel(), self.biases[i],
                          self.scales[i], self.shifts[i]))
        parts.extend((self.head_weight.ravel(), self.head_bias))
        return np.concatenate(parts)

    def set_full_vector(self, vec: np.ndarray) -> None:
        expected = self.num_full()
        if vec.shape != (expected,):
            raise ModelError(f"full vector length {vec.shape} != ({expected},)")
        off = 0
        for i in range(len(self.arch.hidden)):
            n = self.weights[i].size
            self.weights[i] = vec[off:off + n].reshape(self.weights[i].shape).copy()
            off += n
            for name in ("biases", "scales", "shifts"):
                arr = getattr(self, name)
                n = arr[i].size
                arr[i] = vec[off:off + n].copy()
                off += n
        n = self.head_weight.size
        self.head_weight = vec[off:off + n].reshape(self.head_weight.shape).copy()
        off += n
        self.head_bias = vec[off:].copy()
        self.bump()

    def num_full(self) -> int:
        dims = [self.arch.input_dim, *self.arch.hidden]
        n = sum(dims[i] * dims[i + 1] + 3 * dims[i + 1] for i in range(len(self.arch.hidden)))
        return n + self.feature_dim * self.arch.classes + self.arch.classes

    def copy(self) -> "ModelState":
        return ModelState(
            arch=self.arch,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            scales=[s.copy() for s in self.scales],
            shifts=[s.copy() for s in self.shifts],
            head_weight=self.head_weight.copy(),
            head_bias=self.head_bias.copy(),
            running_mean=[m.copy() for m in self.running_mean],
            running_var=[v.copy() for v in self.running_var],
            norm_eps=self.norm_eps,
            version=self.version,
        )


def init_model(arch: ArchSpec, seed: int, norm_eps: float = NORM_EPS_DEFAULT) -> ModelState:
    """Fresh model: dense weights/biases uniform in +-1/sqrt(fan_in), norm
    scales 1, shifts 0, running stats (0, 1). Deterministic in ``seed``."""
    if norm_eps <= 0:
        raise ModelError(f"norm_eps must be positive, got {norm_eps}")
    gen = rng.substream(seed, rng.MODEL_INIT)
    dims = [arch.input_dim, *arch.hidden]
    weights, biases, scales, shifts, rmean, rvar = [], [], [], [], [], []
    for fan_in, width in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(gen.uniform(-bound, bound, size=(fan_in, width)))
        biases.append(gen.uniform(-bound, bound, size=width))
        scales.append(np.ones(width))
        shifts.append(np.zeros(width))
        rmean.append(np.zeros(width))
        rvar.append(np.ones(width))
    feat = dims[-1]
    bound = 1.0 / np.sqrt(feat)
    head_w = gen.uniform(-bound, bound, size=(feat, arch.classes))
    head_b = gen.uniform(-bound, bound, size=arch.classes)
    return ModelState(arch, weights, biases, scales, shifts, head_w, head_b,
                      rmean, rvar, norm_eps=norm_eps)


# --- forward --------------------------------------------------------------


@dataclass
class ForwardCache:
    """Intermediates of one forward pass, sufficient for backward."""

    mode: str
    version: int
    x: np.ndarray
    block_in: list[np.ndarray]     # input to each dense layer
    pre_norm: list[np.ndarray]     # dense output z
    mean: list[np.ndarray]
    inv_std: list[np.ndarray]
    x_hat: list[np.ndarray]
    post_norm: list[np.ndarray]    # scale * x_hat + shift (pre-ReLU)
    features: np.ndarray
    logits: np.ndarray


def forward(model: ModelState, x: np.ndarray, mode: str = "batch") -> ForwardCache:
    """Run the network on a batch (n, d). Returns the cache; ``features`` and
    ``logits`` live on it."""
    if mode not in ("batch", "source"):
        raise ModelError(f"unknown forward mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise ModelError(f"batch shape {x.shape} incompatible with input_dim "
                         f"{model.arch.input_dim}")
    if x.shape[0] == 0:
        raise ModelError("empty batch")

    h = x
    block_in, pre_norm, means, inv_stds, x_hats, post_norms = [], [], [], [], [], []
    for i in range(len(model.arch.hidden)):
        block_in.append(h)
        z = h @ model.weights[i] + model.biases[i]
        if mode == "batch":
            mu = z.mean(axis=0)
            var = z.var(axis=0)
        else:
            mu = model.running_mean[i]
            var = model.running_var[i]
        inv = 1.0 / np.sqrt(var + model.norm_eps)
        xh = (z - mu) * inv
        y = model.scales[i] * xh + model.shifts[i]
        pre_norm.append(z)
        means.append(mu)
        inv_stds.append(inv)
        x_hats.append(xh)
        post_norms.append(y)
        h = np.maximum(y, 0.0)

    logits = h @ model.head_weight + model.head_bias
    return ForwardCache(mode=mode, version=model.version, x=x,
                        block_in=block_in, pre_norm=pre_norm, mean=means,
                        inv_std=inv_stds, x_hat=x_hats, post_norm=post_norms,
                        features=h, logits=logits)


def batch_statistics(model: ModelState, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-norm-layer mean/variance of ``x`` run through the net in batch mode;
    used to record source running statistics after pretraining."""
    cache = forward(model, x, mode="batch")
    variances = [1.0 / inv**2 - model.norm_eps for inv in cache.inv_std]
    return [m.copy() for m in cache.mean], variances


# --- probability helpers ----------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise max-subtracted softmax; accepts a single row or a matrix."""
    z = np.asarray(logits, dtype=np.float64)
    if np.any(~np.isfinite(z)):
        raise ModelError("non-finite logits")
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(probs: np.ndarray) -> np.ndarray | float:
    """Shannon entropy in nats with the 0*log(0)=0 convention."""
    p = np.asarray(probs, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def cross_entropy(probs_row: np.ndarray, label: int) -> float:
    """-log p[label], with probabilities clamped below at 1e-12."""
    p = np.asarray(probs_row, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise ModelError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[label], _PROB_FLOOR)))


# --- losses and backward ----------------------------------------------------


@dataclass
class LossSpec:
    """Scalar loss over a subset of batch rows.

    kind "cross_entropy": CE over ``indices`` against ``labels``.
    kind "entropy":       prediction entropy over ``indices``.
    ``reduction`` is "mean" or "sum" over the index set. The supervised term
    uses the mean (size-stable under replay); the online entropy objective is
    a sum over the confident samples, which keeps its gradient norm on the
    same scale as a single annotated sample's and is what makes the
    norm-ratio weighting meaningful.
    """

    kind: str
    indices: np.ndarray
    labels: np.ndarray | None = None
    reduction: str = "mean"

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.intp)
        if self.kind not in ("cross_entropy", "entropy"):
            raise ModelError(f"unknown loss kind {self.kind!r}")
        if self.reduction not in ("mean", "sum"):
            raise ModelError(f"unknown reduction {self.reduction!r}")
        if self.kind == "cross_entropy":
            if self.labels is None:
                raise ModelError("cross_entropy loss needs labels")
            self.labels = np.asarray(self.labels, dtype=np.intp)
            if self.labels.shape != self.indices.shape:
                raise ModelError("labels/indices length mismatch")


def loss_value_and_dlogits(spec: LossSpec, logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss value and its exact gradient w.r.t. the logits matrix.

    An empty index set yields loss 0 and a zero gradient.
    """
    dlogits = np.zeros_like(logits)
    idx = spec.indices
    if idx.size == 0:
        return 0.0, dlogits
    probs = softmax(logits[idx])
    n = idx.size
    scale = 1.0 / n if spec.reduction == "mean" else 1.0
    if spec.kind == "cross_entropy":
        picked = probs[np.arange(n), spec.labels]
        value = float(-np.log(np.maximum(picked, _PROB_FLOOR)).sum() * scale)
        grad = probs.copy()
        grad[np.arange(n), spec.labels] -= 1.0
        dlogits[idx] = grad * scale
    else:
        logp = np.log(np.where(probs > 0.0, probs, 1.0))
        h = -(probs * logp).sum(axis=1)
        value = float(h.sum() * scale)
        # dH/dz_j = -p_j (log p_j + H)
        dlogits[idx] = -probs * (logp + h[:, None]) * scale
    return value, dlogits


def backward(model: ModelState, cache: ForwardCache, dlogits: np.ndarray,
             wrt: str = "trainable") -> np.ndarray:
    """Exact reverse-mode gradient of a scalar loss given dL/dlogits.

    ``wrt="trainable"`` returns the gradient over the norm scale/shift vector;
    ``wrt="full"`` over every parameter (used only by source pretraining).
    In batch mode the dependence of the batch statistics on the inputs is
    differentiated through, not detached.
    """
    if cache.version != model.version:
        raise ModelError("stale forward cache: model has been mutated")
    if wrt not in ("trainable", "full"):
        raise ModelError(f"unknown wrt {wrt!r}")

    k = len(model.arch.hidden)
    d_feat = dlogits @ model.head_weight.T
    grads_scale = [None] * k
    grads_shift = [None] * k
    grads_w = [None] * k
    grads_b = [None] * k
    d_head_w = cache.features.T @ dlogits
    d_head_b = dlogits.sum(axis=0)

    dh = d_feat
    for i in reversed(range(k)):
        dy = dh * (cache.post_norm[i] > 0.0)
        xh = cache.x_hat[i]
        grads_scale[i] = (dy * xh).sum(axis=0)
        grads_shift[i] = dy.sum(axis=0)
        dxh = dy * model.scales[i]
        inv = cache.inv_std[i]
        if cache.mode == "batch":
            # Gradients flow through mean and variance; for a 1-row batch this
            # collapses to exactly zero, as it must (x_hat is identically 0).
            dz = inv * (dxh - dxh.mean(axis=0) - xh * (dxh * xh).mean(axis=0))
        else:
            dz = dxh * inv
        grads_w[i] = cache.block_in[i].T @ dz
        grads_b[i] = dz.sum(axis=0)
        dh = dz @ model.weights[i].T

    if wrt == "trainable":
        parts = []
        for s, b in zip(grads_scale, grads_shift):
            parts.extend((s, b))
        return np.concatenate(parts) if parts else np.zeros(0)
    parts = []
    for i in range(k):
        parts.extend((grads_w[i].ravel(), grads_b[i], grads_scale[i], grads_shift[i]))
    parts.extend((d_head_w.ravel(), d_head_b))
    return np.concatenate(parts)


def backward_trainable(model: ModelState, cache: ForwardCache, spec: LossSpec) -> np.ndarray:
    """Gradient of ``spec`` over the trainable (norm affine) parameters."""
    _, dlogits = loss_value_and_dlogits(spec, cache.logits)
    return backward(model, cache, dlogits, wrt="trainable")


# --- optimizers ---------------------------------------------------------------


class NonFiniteGradient(RuntimeError):
    """Optimizer step refused: the gradient contains NaN or inf."""


@dataclass
class OptimizerState:
    """SGD-with-momentum or Adam over a flat parameter vector."""

    kind: str
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    t: int = 0
    velocity: np.ndarray | None = None
    second: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ModelError(f"unknown optimizer kind {self.kind!r}")

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            kind=self.kind, lr=self.lr, momentum=self.momentum,
            beta1=self.beta1, beta2=self.beta2, adam_eps=self.adam_eps,
            t=self.t,
            velocity=None if self.velocity is None else self.velocity.copy(),
            second=None if self.second is None else self.second.copy(),
        )


def optimizer_step(model: ModelState, opt: OptimizerState, grad: np.ndarray,
                   wrt: str = "trainable") -> None:
    """Apply one update in place. Only the selected parameter view changes.

    SGD:  v <- momentum*v + g;  theta <- theta - lr*v.
    Adam: standard bias-corrected update.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("gradient contains non-finite entries")
    theta = model.trainable_vector() if wrt == "trainable" else model.full_vector()
    if grad.shape != theta.shape:
        raise ModelError(f"gradient length {grad.shape} != parameters {theta.shape}")
    if opt.velocity is None:
        opt.velocity = np.zeros_like(theta)
    if opt.kind == "adam" and opt.second is None:
        opt.second = np.zeros_like(theta)
    if opt.velocity.shape != theta.shape:
        raise ModelError("optimizer state does not match parameter view")

    if opt.kind == "sgd":
        opt.velocity = opt.momentum * opt.velocity + grad
        theta = theta - opt.lr * opt.velocity
    else:
        opt.t += 1
        opt.velocity = opt.beta1 * opt.velocity + (1 - opt.beta1) * grad
        opt.second = opt.beta2 * opt.second + (1 - opt.beta2) * grad * grad
        m_hat = opt.velocity / (1 - opt.beta1 ** opt.t)
        v_hat = opt.second / (1 - opt.beta2 ** opt.t)
        theta = theta - opt.lr * m_hat / (np.sqrt(v_hat) + opt.adam_eps)

    if wrt == "trainable":
        model.set_trainable_vector(theta)
    else:
        model.set_full_vector(theta)

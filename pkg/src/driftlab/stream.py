"""Source data, synthetic corruption domains, and online target streams.

The source domain is a labeled Gaussian-blob mixture (or an ingested JSONL
dataset); target streams replay the same class-conditional generators through
an ordered sequence of corruption domains at chosen severities. Everything is
deterministic in the master seed: domain d, batch t draws from the stream
substream keyed (d, t), so replaying an episode is bit-identical.
"""

from __future__ import annotations

import base64
import binascii
import json
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .model import LossSpec, ModelState, OptimizerState, backward, forward, \
    loss_value_and_dlogits, optimizer_step

CORRUPTION_KINDS = ("feature-shift", "feature-rotation", "additive-gaussian",
                    "scale", "compose")


class StreamError(ValueError):
    pass


class StreamExhausted(RuntimeError):
    """next_event() called after the end-of-episode marker."""


class PretrainDiverged(RuntimeError):
    """Non-finite loss during source pretraining."""


# --- data containers --------------------------------------------------------


@dataclass
class ImagePayload:
    data: bytes
    width: int
    height: int


@dataclass
class Sample:
    x: np.ndarray
    true_label: int
    domain_id: int = -1
    stream_index: int = -1
    img: ImagePayload | None = None


@dataclass
class Dataset:
    x: np.ndarray                      # (n, d)
    y: np.ndarray                      # (n,)
    imgs: list[ImagePayload | None] | None = None

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def classes(self) -> int:
        return int(self.y.max()) + 1 if len(self) else 0


@dataclass
class Batch:
    x: np.ndarray                      # (n, d)
    y: np.ndarray                      # hidden truth; oracles/metrics only
    domain_id: int
    domain_name: str
    stream_indices: np.ndarray         # (n,), strictly increasing, gap-free
    imgs: list[ImagePayload | None] | None = None

    def __len__(self) -> int:
        return self.x.shape[0]


# --- source specification -----------------------------------------------------


@dataclass
class SourceSpec:
    """Class-conditional Gaussians: one center and isotropic/full covariance
    per class, plus the per-class sample count."""

    centers: np.ndarray                # (C, d)
    covs: np.ndarray                   # (C, d, d)
    per_class: int

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        if self.centers.ndim != 2:
            raise StreamError("centers must be (classes, dim)")
        c, d = self.centers.shape
        if self.covs.shape != (c, d, d):
            raise StreamError(f"covs shape {self.covs.shape} != ({c}, {d}, {d})")
        if self.per_class < 1:
            raise StreamError("per_class must be >= 1")
        # Cholesky both validates positive-definiteness and feeds sampling.
        try:
            self.chols = np.linalg.cholesky(self.covs)
        except np.linalg.LinAlgError as exc:
            raise StreamError(f"degenerate covariance: {exc}") from exc

    @property
    def classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def blob_source(classes: int, dim: int, center_scale: float = 3.0,
                cov_scale: float = 1.0, per_class: int = 400) -> SourceSpec:
    """Standard blob layout: class centers evenly spaced on a circle in the
    first two dimensions (zero elsewhere), isotropic covariance."""
    if classes < 2 or dim < 2:
        raise StreamError("blob source needs classes >= 2 and dim >= 2")
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = np.zeros((classes, dim))
    centers[:, 0] = center_scale * np.cos(angles)
    centers[:, 1] = center_scale * np.sin(angles)
    covs = np.tile(cov_scale * np.eye(dim), (classes, 1, 1))
    return SourceSpec(centers=centers, covs=covs, per_class=per_class)


def make_source_dataset(spec: SourceSpec, seed: int) -> Dataset:
    """Deterministic labeled draw from the source mixture, shuffled."""
    gen = rng.substream(seed, rng.DATASET)
    xs, ys = [], []
    for c in range(spec.classes):
        z = gen.standard_normal((spec.per_class, spec.dim))
        xs.append(spec.centers[c] + z @ spec.chols[c].T)
        ys.append(np.full(spec.per_class, c, dtype=np.intp))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    order = gen.permutation(len(y))
    return Dataset(x=x[order], y=y[order])


def split_dataset(ds: Dataset, holdout_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    gen = rng.substream(seed, rng.DATASET, 1)
    n = len(ds)
    order = gen.permutation(n)
    cut = n - int(round(holdout_frac * n))
    tr, ho = order[:cut], order[cut:]
    def pick(idx):
        imgs = None if ds.imgs is None else [ds.imgs[i] for i in idx]
        return Dataset(x=ds.x[idx], y=ds.y[idx], imgs=imgs)
    return pick(tr), pick(ho)


# --- corruptions ---------------------------------------------------------------


@dataclass
class CorruptionSpec:
    kind: str
    delta: np.ndarray | float = 0.0    # feature-shift
    angle: float = 0.0                 # feature-rotation, radians
    sigma: float = 0.0                 # additive-gaussian
    factors: np.ndarray | float = 1.0  # scale
    parts: list["CorruptionSpec"] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise StreamError(f"unknown corruption kind {self.kind!r}")
        for v in (self.angle, self.sigma):
            if not np.isfinite(v):
                raise StreamError("corruption severity must be finite")


def corrupt(x: np.ndarray, spec: CorruptionSpec, gen: np.random.Generator) -> np.ndarray:
    """Apply one corruption to a feature row or matrix; labels are untouched
    by construction (this function never sees them)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x[None, :] if single else x
    if spec.kind == "feature-shift":
        out = xs + np.asarray(spec.delta, dtype=np.float64)
    elif spec.kind == "feature-rotation":
        d = xs.shape[1]
        if d % 2 != 0:
            raise StreamError(f"rotation needs paired dimensions, got d={d}")
        out = xs.copy()
        c, s = np.cos(spec.angle), np.sin(spec.angle)
        for j in range(0, d, 2):
            a, b = xs[:, j], xs[:, j + 1]
            out[:, j] = c * a - s * b
            out[:, j + 1] = s * a + c * b
    elif spec.kind == "additive-gaussian":
        noise = gen.standard_normal(xs.shape) * spec.sigma
        out = xs + noise
    elif spec.kind == "scale":
        out = xs * np.asarray(spec.factors, dtype=np.float64)
    else:  # compose, left to right
        out = xs
        for part in spec.parts:
            out = corrupt(out, part, gen)
    return out[0] if single else out


@dataclass
class DomainSpec:
    name: str
    corruption: CorruptionSpec
    batch_count: int
    priors: np.ndarray | None = None   # None = uniform over source classes

    def __post_init__(self):
        if self.batch_count < 1:
            raise StreamError("batch_count must be >= 1")
        if self.priors is not None:
            p = np.asarray(self.priors, dtype=np.float64)
            if np.any(p < 0) or not np.isclose(p.sum(), 1.0):
                raise StreamError("class priors must be nonnegative and sum to 1")
            self.priors = p


@dataclass
class EpisodeSpec:
    domains: list[DomainSpec]
    batch_size: int = 64
    mode: str = "ctta"                 # ctta | ftta

    def __post_init__(self):
        if not self.domains:
            raise StreamError("episode needs at least one domain")
        if self.batch_size < 1:
            raise StreamError("batch_size must be >= 1")
        if self.mode not in ("ctta", "ftta"):
            raise StreamError(f"mode must be ctta or ftta, got {self.mode!r}")


DOMAIN_BOUNDARY = object()
END_OF_EPISODE = object()


class EpisodeStream:
    """Ordered batch stream over the episode's domains.

    Yields Batch objects, the DOMAIN_BOUNDARY sentinel between domains, and
    END_OF_EPISODE once; iterating past the end raises StreamExhausted.
    Target samples are drawn from the source generators (or the sample pool)
    under the domain's class priors, then corrupted.
    """

    def __init__(self, source: SourceSpec | Dataset, episode: EpisodeSpec, seed: int):
        self.source = source
        self.episode = episode
        self.seed = seed
        self._stream_index = 0
        self._exhausted = False
        self._events = self._generate()
        if isinstance(source, Dataset):
            self._pool_by_class = [np.flatnonzero(source.y == c)
                                   for c in range(source.classes)]

    @property
    def classes(self) -> int:
        return self.source.classes

    def _draw_batch(self, dom_i: int, dom: DomainSpec, batch_i: int) -> Batch:
        # Keyed by position WITHIN the domain: identical domain specs yield
        # identical batches wherever they sit in the episode, which is what
        # makes FTTA trajectories on repeated domains exactly repeatable.
        gen = rng.substream(self.seed, rng.STREAM, batch_i)
        n = self.episode.batch_size
        c = self.classes
        priors = dom.priors if dom.priors is not None else np.full(c, 1.0 / c)
        if priors.shape != (c,):
            raise StreamError(f"domain {dom.name!r} priors length != {c} classes")
        y = gen.choice(c, size=n, p=priors).astype(np.intp)
        imgs = None
        if isinstance(self.source, SourceSpec):
            z = gen.standard_normal((n, self.source.dim))
            x = self.source.centers[y] + np.einsum("nij,nj->ni", self.source.chols[y], z)
        else:
            idx = np.array([gen.choice(self._pool_by_class[cls]) for cls in y])
            x = self.source.x[idx]
            if self.source.imgs is not None:
                imgs = [self.source.imgs[i] for i in idx]
        x = corrupt(x, dom.corruption, gen)
        stream_indices = np.arange(self._stream_index, self._stream_index + n)
        self._stream_index += n
        return Batch(x=x, y=y, domain_id=dom_i, domain_name=dom.name,
                     stream_indices=stream_indices, imgs=imgs)

    def _generate(self):
        for dom_i, dom in enumerate(self.episode.domains):
            if dom_i > 0:
                yield DOMAIN_BOUNDARY
            for batch_i in range(dom.batch_count):
                yield self._draw_batch(dom_i, dom, batch_i)
        yield END_OF_EPISODE

    def next_event(self):
        if self._exhausted:
            raise StreamExhausted("episode already ended")
        ev = next(self._events)
        if ev is END_OF_EPISODE:
            self._exhausted = True
        return ev

    def __iter__(self):
        """Batches only; use next_event() when boundaries matter."""
        while True:
            ev = self.next_event()
            if ev is END_OF_EPISODE:
                return
            if ev is not DOMAIN_BOUNDARY:
                yield ev


# --- pretraining ----------------------------------------------------------------


def evaluate_accuracy(m: ModelState, x: np.ndarray, y: np.ndarray,
                      mode: str = "source") -> float:
    cache = forward(m, x, mode=mode)
    pred = np.argmax(cache.logits, axis=1)
    return float(np.mean(pred == y))


def record_running_stats(m: ModelState, x: np.ndarray) -> None:
    """Set the source running statistics from one pass over ``x``."""
    from .model import batch_statistics
    means, variances = batch_statistics(m, x)
    m.running_mean = means
    m.running_var = variances
    m.bump()


def pretrain_source(m: ModelState, ds: Dataset, epochs: int, opt: OptimizerState,
                    seed: int, batch_size: int = 64) -> ModelState:
    """Full-parameter supervised training on the source set.

    Mutates and returns ``m``; records the per-norm-layer running statistics
    from a final full pass. Deterministic in ``seed``.
    """
    if len(ds) == 0:
        raise StreamError("cannot pretrain on an empty dataset")
    from .model import ModelError, NonFiniteGradient
    for epoch in range(epochs):
        gen = rng.substream(seed, rng.PRETRAIN, epoch)
        order = gen.permutation(len(ds))
        for start in range(0, len(ds), batch_size):
            idx = order[start:start + batch_size]
            try:
                cache = forward(m, ds.x[idx], mode="batch")
                spec = LossSpec("cross_entropy", np.arange(len(idx)), ds.y[idx])
                value, dlogits = loss_value_and_dlogits(spec, cache.logits)
                if not np.isfinite(value):
                    raise PretrainDiverged(
                        f"loss became non-finite at epoch {epoch}, offset {start}")
                grad = backward(m, cache, dlogits, wrt="full")
                optimizer_step(m, opt, grad, wrt="full")
            except (ModelError, NonFiniteGradient) as exc:
                raise PretrainDiverged(
                    f"training diverged at epoch {epoch}, offset {start}: {exc}"
                ) from exc
    record_running_stats(m, ds.x)
    return m


# --- JSONL dataset files -----------------------------------------------------------


def load_dataset_file(path) -> Dataset:
    """Read a JSON-lines dataset: one {"x": [...], "y": int, "img"?: {...}}
    record per line. Malformed lines are reported with their line number."""
    xs: list[list[float]] = []
    ys: list[int] = []
    imgs: list[ImagePayload | None] = []
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StreamError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(rec, dict) or "x" not in rec or "y" not in rec:
                raise StreamError(f"{path}:{lineno}: record needs 'x' and 'y'")
            x = rec["x"]
            if not isinstance(x, list) or not all(isinstance(v, (int, float)) for v in x):
                raise StreamError(f"{path}:{lineno}: 'x' must be a list of numbers")
            if dim is None:
                dim = len(x)
            elif len(x) != dim:
                raise StreamError(
                    f"{path}:{lineno}: dimension {len(x)} != {dim} from line 1")
            y = rec["y"]
            if not isinstance(y, int) or y < 0:
                raise StreamError(f"{path}:{lineno}: 'y' must be a non-negative int")
            img = None
            if rec.get("img") is not None:
                meta = rec["img"]
                try:
                    data = base64.b64decode(meta["data"], validate=True)
                    img = ImagePayload(data=data, width=int(meta["width"]),
                                       height=int(meta["height"]))
                except (KeyError, TypeError, ValueError, binascii.Error) as exc:
                    raise StreamError(f"{path}:{lineno}: bad 'img' payload: {exc}") from exc
                if len(img.data) != img.width * img.height:
                    raise StreamError(
                        f"{path}:{lineno}: img data length {len(img.data)} != "
                        f"width*height {img.width * img.height}")
            xs.append(x)
            ys.append(y)
            imgs.append(img)
    if not xs:
        raise StreamError(f"{path}: empty dataset")
    any_img = any(i is not None for i in imgs)
    return Dataset(x=np.asarray(xs, dtype=np.float64),
                   y=np.asarray(ys, dtype=np.intp),
                   imgs=imgs if any_img else None)


def save_dataset_file(path, ds: Dataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(ds)):
            rec = {"x": [float(v) for v in ds.x[i]], "y": int(ds.y[i])}
            img = None if ds.imgs is None else ds.imgs[i]
            if img is not None:
                rec["img"] = {"data": base64.b64encode(img.data).decode("ascii"),
                              "width": img.width, "height": img.height}
            fh.write(json.dumps(rec) + "\n")

"""Glue between RunConfig and the engine/stream/oracle objects, plus the
ablation driver that sweeps one axis over a seed list."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig, apply_axis_value, build_domain, serialize_config
from .engine import AdaptationEngine, EngineConfig, EpisodeAborted, run_episode
from .metrics import RunReport
from .model import ArchSpec, OptimizerState, init_model
from .oracle import AnnotationExchange, Oracle, OracleConfig
from .selection import AnnotationBudget
from .snapshots import Snapshot
from .stream import Dataset, EpisodeSpec, EpisodeStream, SourceSpec, blob_source, \
    evaluate_accuracy, load_dataset_file, make_source_dataset, pretrain_source, \
    split_dataset


def build_source(cfg: RunConfig) -> SourceSpec | Dataset:
    if cfg.source.kind == "blobs":
        return blob_source(classes=cfg.model.classes, dim=cfg.model.input_dim,
                           center_scale=cfg.source.center_scale,
                           cov_scale=cfg.source.cov_scale,
                           per_class=cfg.source.per_class)
    return load_dataset_file(cfg.source.dataset_path)


def pretrain_from_config(cfg: RunConfig, seed: int | None = None) -> tuple[Snapshot, float]:
    """Train the source model; returns its snapshot and holdout accuracy."""
    seed = cfg.run.seed if seed is None else seed
    source = build_source(cfg)
    ds = source if isinstance(source, Dataset) else make_source_dataset(source, seed)
    train, holdout = split_dataset(ds, cfg.source.holdout_frac, seed)
    arch = ArchSpec(cfg.model.input_dim, cfg.model.hidden, cfg.model.classes)
    m = init_model(arch, seed=seed, norm_eps=cfg.model.norm_eps)
    opt = OptimizerState(kind="sgd", lr=cfg.pretrain.lr, momentum=cfg.pretrain.momentum)
    pretrain_source(m, train, epochs=cfg.pretrain.epochs, opt=opt, seed=seed,
                    batch_size=cfg.pretrain.batch_size)
    acc = evaluate_accuracy(m, holdout.x, holdout.y, mode="source") if len(holdout) \
        else float("nan")
    return Snapshot.take(m), acc


def engine_config(cfg: RunConfig) -> EngineConfig:
    return EngineConfig(
        classes=cfg.model.classes,
        strategy=cfg.selection.strategy,
        use_pd=cfg.engine.pd, use_cb=cfg.engine.cb,
        use_gnd=cfg.engine.gnd, use_ema=cfg.engine.ema,
        sigma=cfg.selection.sigma, mu=cfg.selection.mu,
        diff_draws=cfg.selection.diff_draws, history_k=cfg.selection.history_k,
        budget=AnnotationBudget(labels_per_batch=cfg.budget.labels_per_batch,
                                batches_per_label=cfg.budget.batches_per_label),
        alpha=cfg.engine.alpha, threshold_factor=cfg.engine.threshold_factor,
        buffer_size=cfg.engine.buffer_size, replay_draw=cfg.engine.replay_draw,
        optimizer=cfg.engine.optimizer, lr=cfg.engine.lr,
        momentum=cfg.engine.momentum,
        idle_unsup_weight=cfg.engine.idle_unsup_weight,
        source_norm_mode=cfg.engine.source_norm_mode,
    )


def oracle_from_config(cfg: RunConfig, seed: int,
                       exchange: AnnotationExchange | None = None) -> Oracle:
    oc = OracleConfig(kind=cfg.oracle.kind, noise_p=cfg.oracle.noise_p,
                      snapshot_path=cfg.oracle.snapshot or None,
                      timeout_s=cfg.oracle.timeout_s,
                      fallback=cfg.oracle.fallback or None,
                      show_pseudo_hint=cfg.oracle.show_pseudo_hint,
                      class_names=list(cfg.oracle.class_names) or None)
    return Oracle(oc, classes=cfg.model.classes, master_seed=seed, exchange=exchange)


def stream_from_config(cfg: RunConfig, seed: int) -> EpisodeStream:
    domains = [build_domain(d) for d in cfg.episode.domains]
    episode = EpisodeSpec(domains=domains, batch_size=cfg.episode.batch_size,
                          mode=cfg.episode.mode)
    return EpisodeStream(build_source(cfg), episode, seed)


def execute_run(cfg: RunConfig, snapshot: Snapshot | None = None,
                seed: int | None = None,
                exchange: AnnotationExchange | None = None,
                raise_on_abort: bool = True) -> RunReport:
    """Pretrain (unless a snapshot is supplied), stream, adapt, report."""
    seed = cfg.run.seed if seed is None else seed
    if snapshot is None:
        snapshot, _ = pretrain_from_config(cfg, seed)
    engine = AdaptationEngine(snapshot, engine_config(cfg),
                              oracle_from_config(cfg, seed, exchange), seed)
    stream = stream_from_config(cfg, seed)
    echo = serialize_config(replace(cfg, run=replace(cfg.run, seed=seed)))
    return run_episode(engine, stream, config_echo=echo,
                       raise_on_abort=raise_on_abort)


@dataclass
class AblationCell:
    axis: str
    value: str
    errors: list[float]          # per-seed average error rates
    failure: str | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors)) if self.errors else math.nan

    @property
    def stdev(self) -> float:
        return float(np.std(self.errors, ddof=1)) if len(self.errors) > 1 else 0.0


def execute_ablation(cfg: RunConfig, progress=None) -> list[AblationCell]:
    """Run the sweep grid: every axis value x every seed. A failing cell is
    recorded and the grid continues. Source snapshots are shared per seed."""
    if cfg.ablate is None:
        raise ValueError("config has no [ablate] section")
    snapshots: dict[int, Snapshot] = {}
    cells: list[AblationCell] = []
    for value in cfg.ablate.values:
        cell = AblationCell(axis=cfg.ablate.axis, value=value, errors=[])
        cell_cfg = apply_axis_value(cfg, cfg.ablate.axis, value)
        for seed in cfg.ablate.seeds:
            try:
                if seed not in snapshots:
                    snapshots[seed], _ = pretrain_from_config(cfg, seed)
                report = execute_run(cell_cfg, snapshot=snapshots[seed], seed=seed)
                cell.errors.append(report.average_error_rate)
            except (EpisodeAborted, Exception) as exc:  # noqa: BLE001 - grid must continue
                cell.failure = f"seed {seed}: {exc}"
            if progress is not None:
                progress(value, seed)
        cells.append(cell)
    return cells


def ablation_table(cells: list[AblationCell]) -> str:
    lines = ["value,mean_error_pct,stdev_pct,seeds,failure"]
    for c in cells:
        fail = c.failure or ""
        lines.append(f"{c.value},{100 * c.mean:.4f},{100 * c.stdev:.4f},"
                     f"{len(c.errors)},{fail}")
    return "\n".join(lines) + "\n"

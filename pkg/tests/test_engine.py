"""Engine: debias arithmetic, replay buffer, the full step against a
straight-line scripted reference, and episode semantics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftlab import rng
from driftlab.engine import (
    AdaptationEngine,
    DebiasState,
    EngineConfig,
    EpisodeAborted,
    ReplayBuffer,
    debias_weights,
    ema_update,
    reference_entropy_step,
    run_episode,
)
from driftlab.metrics import export_json
from driftlab.model import ArchSpec, LossSpec, OptimizerState, backward, forward, \
    init_model, loss_value_and_dlogits, init_model as _init, softmax
from driftlab.oracle import AnnotationExchange, Oracle, OracleConfig
from driftlab.selection import AnnotationBudget
from driftlab.snapshots import Snapshot
from driftlab.stream import CorruptionSpec, DomainSpec, EpisodeSpec, EpisodeStream, \
    blob_source, make_source_dataset, pretrain_source

from test_selection import brute_force_diffs, brute_force_pick


class TestDebiasWeights:
    def test_three_one(self):
        assert debias_weights(3.0, 1.0) == (0.5, 1.5)

    def test_symmetric(self):
        assert debias_weights(5.0, 5.0) == (1.0, 1.0)

    def test_degenerate_fallback(self):
        assert debias_weights(0.0, 0.0) == (1.0, 1.0)
        assert debias_weights(1.0, 0.0) == (1.0, 1.0)
        assert debias_weights(1e-13, 5.0) == (1.0, 1.0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            debias_weights(-1.0, 1.0)

    @given(st.floats(1e-10, 1e6), st.floats(1e-10, 1e6))
    def test_sums_to_two(self, ns, nu):
        g1, g2 = debias_weights(ns, nu)
        assert abs(g1 + g2 - 2.0) < 1e-9
        assert 0.0 <= g1 <= 2.0 and 0.0 <= g2 <= 2.0


class TestEmaUpdate:
    def test_spec_example(self):
        state = DebiasState(alpha=0.8)
        ema_update(state, (0.5, 1.5))
        assert state.gamma1 == pytest.approx(0.9, abs=1e-15)
        assert state.gamma2 == pytest.approx(1.1, abs=1e-15)

    def test_fixed_point(self):
        state = DebiasState(alpha=0.8)
        state.gamma1, state.gamma2 = 0.7, 1.3
        ema_update(state, (0.7, 1.3))
        assert (state.gamma1, state.gamma2) == (0.7, 1.3)

    def test_geometric_contraction(self):
        state = DebiasState(alpha=0.8)
        target = (0.4, 1.6)
        gap = abs(state.gamma1 - target[0])
        for _ in range(10):
            ema_update(state, target)
            new_gap = abs(state.gamma1 - target[0])
            assert new_gap == pytest.approx(0.8 * gap, rel=1e-9)
            gap = new_gap

    def test_alpha_bounds_enforced(self):
        with pytest.raises(ValueError):
            DebiasState(alpha=1.0)
        with pytest.raises(ValueError):
            DebiasState(alpha=0.0)


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(capacity=2, draw_size=4)
        for i, tag in enumerate("abc"):
            buf.push(np.array([float(i)]), i, 0)
        assert [it[1] for it in buf.items] == [1, 2]

    def test_draw_returns_all_when_small(self):
        buf = ReplayBuffer(capacity=10, draw_size=32)
        for i in range(5):
            buf.push(np.array([float(i)]), i, 0)
        got = buf.draw(rng.substream(0, rng.REPLAY, 0))
        assert len(got) == 5
        assert len({it[1] for it in got}) == 5

    def test_draw_caps_at_draw_size(self):
        buf = ReplayBuffer(capacity=100, draw_size=3)
        for i in range(50):
            buf.push(np.array([float(i)]), i, 0)
        got = buf.draw(rng.substream(0, rng.REPLAY, 1))
        assert len(got) == 3

    def test_disabled_buffer_ignores_pushes(self):
        buf = ReplayBuffer(capacity=0)
        buf.push(np.array([1.0]), 0, 0)
        assert len(buf) == 0

    def test_draw_distribution_uniform(self):
        # chi-squared over 10k single-item draws from 10 items, alpha=0.01
        buf = ReplayBuffer(capacity=10, draw_size=1)
        for i in range(10):
            buf.push(np.array([float(i)]), i, 0)
        counts = np.zeros(10)
        for t in range(10_000):
            item = buf.draw(rng.substream(123, rng.REPLAY, t))[0]
            counts[item[1]] += 1
        expected = 1_000.0
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        # df=9, critical value at 0.01 is 21.666
        assert chi2 < 21.666


# --- full-step scripted reference -------------------------------------------------


def bench_setup(seed=0, classes=4, dim=4, hidden=(8,), n=16):
    src = blob_source(classes=classes, dim=dim, center_scale=3.0, cov_scale=1.0,
                      per_class=120)
    ds = make_source_dataset(src, seed)
    m = init_model(ArchSpec(dim, hidden, classes), seed=seed)
    pretrain_source(m, ds, epochs=10, opt=OptimizerState(kind="sgd", lr=0.05),
                    seed=seed)
    episode = EpisodeSpec(domains=[DomainSpec(
        name="shifted", corruption=CorruptionSpec(kind="compose", parts=[
            CorruptionSpec(kind="feature-rotation", angle=0.5),
            CorruptionSpec(kind="additive-gaussian", sigma=0.4)]),
        batch_count=6)], batch_size=n)
    return src, Snapshot.take(m), episode


def scripted_reference_run(snapshot, stream, cfg: EngineConfig, seed: int, steps: int):
    """Independent linear implementation of the per-batch pipeline, sharing
    only the numeric primitives (forward/backward/norm)."""
    model = snapshot.model.copy()
    velocity = np.zeros(model.num_trainable())
    g1, g2 = 1.0, 1.0
    history: list[int] = []
    trajectories = []
    for key_step in range(steps):
        batch = stream.next_event()
        cache = forward(model, batch.x, mode="batch")
        probs = softmax(cache.logits)
        pseudo = np.argmax(probs, axis=1)
        logp = np.log(np.where(probs > 0, probs, 1.0))
        entropies = -(probs * logp).sum(axis=1)
        conf = entropies < cfg.threshold_factor * np.log(cfg.classes)

        diffs = brute_force_diffs(model, batch.x, seed, key_step, cfg.sigma)
        chosen = brute_force_pick(diffs, pseudo, history, cfg.history_k, 1,
                                  class_balance=cfg.use_cb)
        pick = chosen[0]
        label = int(batch.y[pick])          # ground-truth oracle
        history.append(label)
        history = history[-cfg.history_k:]

        sup_idx = np.array([pick])
        unsup_idx = np.flatnonzero(conf & (np.arange(len(batch)) != pick))
        _, dsup = loss_value_and_dlogits(LossSpec("cross_entropy", sup_idx,
                                                  np.array([label])), cache.logits)
        _, duns = loss_value_and_dlogits(LossSpec("entropy", unsup_idx, reduction="sum"),
                                         cache.logits)
        g_sup = backward(model, cache, dsup, wrt="trainable")
        g_unsup = backward(model, cache, duns, wrt="trainable")
        ns, nu = np.linalg.norm(g_sup), np.linalg.norm(g_unsup)
        if cfg.use_gnd and ns > 1e-12 and nu > 1e-12:
            raw = (2.0 * nu / (ns + nu), 2.0 * ns / (ns + nu))
        else:
            raw = (1.0, 1.0)
        if cfg.use_ema:
            g1 = cfg.alpha * g1 + (1.0 - cfg.alpha) * raw[0]
            g2 = cfg.alpha * g2 + (1.0 - cfg.alpha) * raw[1]
        else:
            g1, g2 = raw

        grad = g1 * g_sup + g2 * g_unsup
        velocity = cfg.momentum * velocity + grad
        model.set_trainable_vector(model.trainable_vector() - cfg.lr * velocity)
        trajectories.append(model.trainable_vector())
    return trajectories


class TestAdaptStepAgainstReference:
    @pytest.mark.parametrize("gnd,ema,cb", [(True, True, True), (True, False, True),
                                            (False, False, False)])
    def test_full_step_sequence_bitwise_equal(self, gnd, ema, cb):
        src, snapshot, episode = bench_setup(seed=3)
        cfg = EngineConfig(classes=4, sigma=0.02, use_gnd=gnd, use_ema=ema,
                           use_cb=cb, lr=0.05, momentum=0.9,
                           budget=AnnotationBudget(labels_per_batch=1))
        oracle = Oracle(OracleConfig(kind="ground_truth"), classes=4, master_seed=3)
        engine = AdaptationEngine(snapshot, cfg, oracle, master_seed=3)
        stream_a = EpisodeStream(src, episode, seed=3)
        stream_b = EpisodeStream(src, episode, seed=3)
        want = scripted_reference_run(snapshot, stream_b, cfg, seed=3, steps=5)
        for t in range(5):
            batch = stream_a.next_event()
            engine.adapt_step(batch)
            assert np.array_equal(engine.model.trainable_vector(), want[t]), \
                f"divergence from scripted reference at step {t}"

    def test_gamma_trace_on_crafted_norms(self):
        # raw (3,1) -> (0.5, 1.5); EMA from (1,1) at alpha 0.8 -> (0.9, 1.1)
        state = DebiasState(alpha=0.8)
        raw = debias_weights(3.0, 1.0)
        ema_update(state, raw)
        assert (state.gamma1, state.gamma2) == (pytest.approx(0.9), pytest.approx(1.1))


class TestStepEdgeCases:
    def make_engine(self, budget=1, threshold=0.4, per_m=1, **over):
        src, snapshot, episode = bench_setup(seed=5)
        cfg = EngineConfig(classes=4, threshold_factor=threshold,
                           budget=AnnotationBudget(labels_per_batch=budget,
                                                   batches_per_label=per_m),
                           **over)
        oracle = Oracle(OracleConfig(kind="ground_truth"), classes=4, master_seed=5)
        engine = AdaptationEngine(snapshot, cfg, oracle, master_seed=5)
        return engine, EpisodeStream(src, episode, seed=5)

    def test_no_budget_no_confident_freezes_model(self):
        engine, stream = self.make_engine(budget=0, threshold=0.0)
        batch = stream.next_event()
        before = engine.model.trainable_vector()
        g_before = (engine.debias.gamma1, engine.debias.gamma2)
        report = engine.adapt_step(batch)
        assert not report.stepped
        assert np.array_equal(engine.model.trainable_vector(), before)
        assert (engine.debias.gamma1, engine.debias.gamma2) == g_before

    def test_annotated_sample_never_in_unsup_set(self):
        engine, stream = self.make_engine(budget=2, threshold=np.inf)
        for _ in range(3):
            report = engine.adapt_step(stream.next_event())
            assert len(report.annotated_indices) == 2
            assert not set(report.annotated_indices) & set(report.unsup_indices.tolist())
            # with an infinite threshold every unannotated sample is confident
            assert report.n_unsup == report.batch_size - 2

    def test_budget_every_m_batches(self):
        engine, stream = self.make_engine(budget=1, per_m=3)
        annotated = [len(engine.adapt_step(stream.next_event()).chosen)
                     for _ in range(6)]
        assert annotated == [1, 0, 0, 1, 0, 0]

    def test_gamma_carried_on_idle_batches(self):
        engine, stream = self.make_engine(budget=1, per_m=3)
        engine.adapt_step(stream.next_event())          # annotates, updates gamma
        g_after_first = (engine.debias.gamma1, engine.debias.gamma2)
        report = engine.adapt_step(stream.next_event())  # idle: ns == 0
        assert report.n_sup == 0
        assert (engine.debias.gamma1, engine.debias.gamma2) == g_after_first
        assert report.gamma == g_after_first

    def test_oracle_timeout_without_fallback_aborts(self):
        src, snapshot, episode = bench_setup(seed=5)
        cfg = EngineConfig(classes=4)
        oracle = Oracle(OracleConfig(kind="human", timeout_s=0.05, fallback=None),
                        classes=4, master_seed=5, exchange=AnnotationExchange())
        engine = AdaptationEngine(snapshot, cfg, oracle, master_seed=5)
        stream = EpisodeStream(src, episode, seed=5)
        with pytest.raises(EpisodeAborted) as err:
            run_episode(engine, stream)
        assert "no fallback" in str(err.value)
        assert err.value.report.aborted is not None

    def test_numeric_failure_aborts_with_reason(self):
        engine, stream = self.make_engine()
        batch = stream.next_event()
        batch.x[0, 0] = np.nan
        report = engine.adapt_step(batch)
        assert report.abort_reason is not None
        assert "numeric" in report.abort_reason


class TestReplayIntegration:
    def test_buffer_fills_and_draws_into_sup_set(self):
        src, snapshot, episode = bench_setup(seed=7)
        cfg = EngineConfig(classes=4, buffer_size=300, replay_draw=4,
                           budget=AnnotationBudget(labels_per_batch=1))
        oracle = Oracle(OracleConfig(kind="ground_truth"), classes=4, master_seed=7)
        engine = AdaptationEngine(snapshot, cfg, oracle, master_seed=7)
        stream = EpisodeStream(src, episode, seed=7)
        reports = [engine.adapt_step(stream.next_event()) for _ in range(5)]
        assert len(engine.buffer) == 5
        # the annotation is pushed before the draw, so the draw at step t sees
        # t+1 buffered items and the sup set holds 1 + min(4, t+1) rows
        assert [r.n_sup for r in reports] == [2, 3, 4, 5, 5]


def small_two_domain_setup(seed, mode, same_domains=True, lr=0.05, **cfg_over):
    src = blob_source(classes=3, dim=4, center_scale=3.0, cov_scale=0.8,
                      per_class=150)
    ds = make_source_dataset(src, seed)
    m = init_model(ArchSpec(4, (8,), 3), seed=seed)
    pretrain_source(m, ds, epochs=10, opt=OptimizerState(kind="sgd", lr=0.05),
                    seed=seed)
    corr = CorruptionSpec(kind="compose", parts=[
        CorruptionSpec(kind="feature-rotation", angle=0.6),
        CorruptionSpec(kind="additive-gaussian", sigma=0.3)])
    corr2 = corr if same_domains else CorruptionSpec(kind="additive-gaussian", sigma=1.0)
    episode = EpisodeSpec(domains=[
        DomainSpec(name="one", corruption=corr, batch_count=5),
        DomainSpec(name="two", corruption=corr2, batch_count=5)], batch_size=16,
        mode=mode)
    cfg = EngineConfig(classes=3, lr=lr, **cfg_over)
    oracle = Oracle(OracleConfig(kind="ground_truth"), classes=3, master_seed=seed)
    engine = AdaptationEngine(Snapshot.take(m), cfg, oracle, master_seed=seed)
    return engine, EpisodeStream(src, episode, seed=seed)


class TestEpisodes:
    def test_ftta_identical_domains_have_identical_trajectories(self):
        engine, stream = small_two_domain_setup(seed=11, mode="ftta")
        report = run_episode(engine, stream)
        errs = report.traces["error_count"]
        assert errs[:5] == errs[5:]

    def test_ctta_identical_domains_diverge(self):
        # Adaptation carries over in ctta, so the second pass differs.
        engine, stream = small_two_domain_setup(seed=11, mode="ctta")
        report = run_episode(engine, stream)
        errs = report.traces["error_count"]
        assert errs[:5] != errs[5:]

    def test_zero_lr_matches_batch_stat_source_baseline(self):
        engine, stream = small_two_domain_setup(seed=13, mode="ctta", lr=0.0)
        adapted = run_episode(engine, stream)
        base_engine, base_stream = small_two_domain_setup(
            seed=13, mode="ctta", strategy="source", source_norm_mode="batch")
        baseline = run_episode(base_engine, base_stream)
        assert adapted.traces["error_count"] == baseline.traces["error_count"]
        assert adapted.average_error_rate == baseline.average_error_rate

    def test_seeded_run_reports_identical(self):
        outs = []
        for _ in range(2):
            engine, stream = small_two_domain_setup(seed=17, mode="ctta",
                                                    buffer_size=50, replay_draw=8)
            outs.append(export_json(run_episode(engine, stream)))
        assert outs[0] == outs[1]

    def test_non_trainable_parameters_bit_stable_across_run(self):
        engine, stream = small_two_domain_setup(seed=29, mode="ctta",
                                                buffer_size=40, replay_draw=8)
        src = engine.source_snapshot.model
        run_episode(engine, stream)
        m = engine.model
        assert not np.array_equal(m.trainable_vector(), src.trainable_vector())
        for a, b in zip(m.weights, src.weights):
            assert np.array_equal(a, b)
        for a, b in zip(m.biases, src.biases):
            assert np.array_equal(a, b)
        assert np.array_equal(m.head_weight, src.head_weight)
        assert np.array_equal(m.head_bias, src.head_bias)

    def test_gamma_sum_invariant_along_run(self):
        engine, stream = small_two_domain_setup(seed=19, mode="ctta")
        report = run_episode(engine, stream)
        g1 = np.array(report.traces["gamma1"])
        g2 = np.array(report.traces["gamma2"])
        r1 = np.array(report.traces["gamma1_raw"])
        r2 = np.array(report.traces["gamma2_raw"])
        assert np.max(np.abs(g1 + g2 - 2.0)) < 1e-9
        assert np.max(np.abs(r1 + r2 - 2.0)) < 1e-9

    def test_ftta_resets_buffer_and_history(self):
        engine, stream = small_two_domain_setup(seed=23, mode="ftta",
                                                buffer_size=100, replay_draw=8)
        source_vec = engine.source_snapshot.model.trainable_vector()
        seen_boundary = False
        while True:
            from driftlab.stream import DOMAIN_BOUNDARY, END_OF_EPISODE
            ev = stream.next_event()
            if ev is END_OF_EPISODE:
                break
            if ev is DOMAIN_BOUNDARY:
                engine.restore_source()
                assert len(engine.buffer) == 0
                assert len(engine.selection.history) == 0
                assert (engine.debias.gamma1, engine.debias.gamma2) == (1.0, 1.0)
                assert np.array_equal(engine.model.trainable_vector(), source_vec)
                seen_boundary = True
            else:
                engine.adapt_step(ev)
        assert seen_boundary


class TestEntropyOnlyReduction:
    def test_reduces_to_plain_entropy_minimization_bitwise(self):
        # Toggles off + budget 0 + threshold inf == the dedicated plain
        # entropy-minimization path, parameter-for-parameter.
        src, snapshot, episode = bench_setup(seed=29)
        cfg = EngineConfig(classes=4, use_pd=False, use_cb=False, use_gnd=False,
                           use_ema=False, threshold_factor=np.inf,
                           budget=AnnotationBudget(labels_per_batch=0),
                           lr=0.05, momentum=0.9)
        oracle = Oracle(OracleConfig(kind="ground_truth"), classes=4, master_seed=29)
        engine = AdaptationEngine(snapshot, cfg, oracle, master_seed=29)
        stream = EpisodeStream(src, episode, seed=29)

        ref_model = snapshot.model.copy()
        ref_opt = OptimizerState(kind="sgd", lr=0.05, momentum=0.9)
        for _ in range(6):
            batch = stream.next_event()
            engine.adapt_step(batch)
            reference_entropy_step(ref_model, ref_opt, batch.x)
            assert np.array_equal(engine.model.trainable_vector(),
                                  ref_model.trainable_vector())

"""Source data, corruptions, and episode stream behavior."""

import numpy as np
import pytest

from driftlab import rng
from driftlab.model import ArchSpec, OptimizerState, init_model
from driftlab.stream import (
    DOMAIN_BOUNDARY,
    END_OF_EPISODE,
    CorruptionSpec,
    Dataset,
    DomainSpec,
    EpisodeSpec,
    EpisodeStream,
    PretrainDiverged,
    SourceSpec,
    StreamError,
    StreamExhausted,
    blob_source,
    corrupt,
    evaluate_accuracy,
    load_dataset_file,
    make_source_dataset,
    pretrain_source,
    save_dataset_file,
    split_dataset,
)


def two_blob_spec(n=500):
    centers = np.array([[-3.0, 0.0], [3.0, 0.0]])
    covs = np.tile(np.eye(2) * 0.5, (2, 1, 1))
    return SourceSpec(centers=centers, covs=covs, per_class=n)


class TestSourceDataset:
    def test_lda_oracle_separates_well_separated_blobs(self):
        # Closed-form LDA: shared covariance is known (0.5 I), so the Bayes
        # rule is the midpoint hyperplane. It must fit the draw almost
        # perfectly when blobs are 6 sigma apart.
        ds = make_source_dataset(two_blob_spec(), seed=0)
        w = np.array([6.0, 0.0])  # mu1 - mu0
        scores = ds.x @ w
        pred = (scores > 0).astype(int)
        assert np.mean(pred == ds.y) > 0.99

    def test_deterministic(self):
        a = make_source_dataset(two_blob_spec(), seed=9)
        b = make_source_dataset(two_blob_spec(), seed=9)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.y, b.y)

    def test_zero_count_rejected(self):
        with pytest.raises(StreamError):
            SourceSpec(centers=np.zeros((2, 2)), covs=np.tile(np.eye(2), (2, 1, 1)),
                       per_class=0)

    def test_non_psd_covariance_rejected(self):
        bad = np.tile(-np.eye(2), (2, 1, 1))
        with pytest.raises(StreamError):
            SourceSpec(centers=np.zeros((2, 2)), covs=bad, per_class=5)


class TestPretrain:
    def test_reaches_95_percent_on_separable_blobs(self):
        src = blob_source(classes=3, dim=2, center_scale=4.0, cov_scale=0.5,
                          per_class=300)
        ds = make_source_dataset(src, seed=1)
        train, holdout = split_dataset(ds, 0.25, seed=1)
        m = init_model(ArchSpec(2, (16,), 3), seed=1)
        opt = OptimizerState(kind="sgd", lr=0.05, momentum=0.9)
        pretrain_source(m, train, epochs=30, opt=opt, seed=1)
        assert evaluate_accuracy(m, holdout.x, holdout.y, mode="source") >= 0.95

    def test_zero_epochs_only_records_stats(self):
        ds = make_source_dataset(two_blob_spec(100), seed=2)
        m = init_model(ArchSpec(2, (4,), 2), seed=2)
        before = m.full_vector()
        pretrain_source(m, ds, epochs=0,
                        opt=OptimizerState(kind="sgd", lr=0.1), seed=2)
        assert np.array_equal(m.full_vector(), before)
        assert not np.array_equal(m.running_mean[0], np.zeros(4))

    def test_deterministic_in_seed(self):
        ds = make_source_dataset(two_blob_spec(100), seed=3)
        results = []
        for _ in range(2):
            m = init_model(ArchSpec(2, (4,), 2), seed=3)
            pretrain_source(m, ds, epochs=3,
                            opt=OptimizerState(kind="sgd", lr=0.05), seed=3)
            results.append(m.full_vector())
        assert np.array_equal(results[0], results[1])

    def test_divergence_aborts(self):
        # Batch normalization makes this net nearly divergence-proof under
        # large learning rates, so drive the guard with a non-finite feature.
        ds = make_source_dataset(two_blob_spec(100), seed=4)
        ds.x[17, 0] = np.nan
        m = init_model(ArchSpec(2, (4,), 2), seed=4)
        with pytest.raises(PretrainDiverged):
            pretrain_source(m, ds, epochs=2,
                            opt=OptimizerState(kind="sgd", lr=0.05), seed=4,
                            batch_size=len(ds))

    def test_empty_dataset_rejected(self):
        m = init_model(ArchSpec(2, (4,), 2), seed=5)
        empty = Dataset(x=np.zeros((0, 2)), y=np.zeros(0, dtype=np.intp))
        with pytest.raises(StreamError):
            pretrain_source(m, empty, epochs=1,
                            opt=OptimizerState(kind="sgd", lr=0.1), seed=5)


class TestCorruptions:
    def test_zero_noise_is_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        gen = rng.substream(0, rng.STREAM, 0, 0)
        out = corrupt(x, CorruptionSpec(kind="additive-gaussian", sigma=0.0), gen)
        assert np.array_equal(out, x)

    def test_pi_rotation_negates_pairs(self):
        x = np.array([1.0, 2.0, -3.0, 4.0])
        gen = rng.substream(0, rng.STREAM, 0, 0)
        out = corrupt(x, CorruptionSpec(kind="feature-rotation", angle=np.pi), gen)
        assert np.allclose(out, -x, atol=1e-12)

    def test_compose_shift_inverse_pair_is_identity(self):
        x = np.array([[0.5, -1.5, 2.0]])
        spec = CorruptionSpec(kind="compose", parts=[
            CorruptionSpec(kind="feature-shift", delta=np.array([1.0, 2.0, -3.0])),
            CorruptionSpec(kind="feature-shift", delta=np.array([-1.0, -2.0, 3.0])),
        ])
        gen = rng.substream(0, rng.STREAM, 0, 0)
        assert np.allclose(corrupt(x, spec, gen), x, atol=1e-15)

    def test_rotation_on_odd_dims_rejected(self):
        gen = rng.substream(0, rng.STREAM, 0, 0)
        with pytest.raises(StreamError):
            corrupt(np.ones((2, 3)), CorruptionSpec(kind="feature-rotation", angle=0.1), gen)

    def test_scale(self):
        gen = rng.substream(0, rng.STREAM, 0, 0)
        out = corrupt(np.array([1.0, -2.0]), CorruptionSpec(kind="scale", factors=2.0), gen)
        assert np.array_equal(out, [2.0, -4.0])


def small_episode(batches=3, mode="ctta", batch_size=8):
    noise = CorruptionSpec(kind="additive-gaussian", sigma=0.1)
    domains = [DomainSpec(name="a", corruption=noise, batch_count=batches),
               DomainSpec(name="b", corruption=noise, batch_count=batches)]
    return EpisodeSpec(domains=domains, batch_size=batch_size, mode=mode)


class TestEpisodeStream:
    def test_batch_and_boundary_counts(self):
        stream = EpisodeStream(two_blob_spec(50), small_episode(3), seed=0)
        events = []
        while True:
            ev = stream.next_event()
            if ev is END_OF_EPISODE:
                break
            events.append(ev)
        batches = [e for e in events if e is not DOMAIN_BOUNDARY]
        boundaries = [e for e in events if e is DOMAIN_BOUNDARY]
        assert len(batches) == 6
        assert len(boundaries) == 1
        assert events.index(DOMAIN_BOUNDARY) == 3

    def test_past_end_raises(self):
        stream = EpisodeStream(two_blob_spec(50), small_episode(1), seed=0)
        while stream.next_event() is not END_OF_EPISODE:
            pass
        with pytest.raises(StreamExhausted):
            stream.next_event()

    def test_replay_is_bit_identical(self):
        runs = []
        for _ in range(2):
            stream = EpisodeStream(two_blob_spec(50), small_episode(2), seed=11)
            runs.append([b for b in stream])
        for a, b in zip(runs[0], runs[1]):
            assert np.array_equal(a.x, b.x)
            assert np.array_equal(a.y, b.y)

    def test_forced_prior_pins_labels(self):
        noise = CorruptionSpec(kind="additive-gaussian", sigma=0.1)
        episode = EpisodeSpec(domains=[DomainSpec(
            name="only0", corruption=noise, batch_count=2,
            priors=np.array([1.0, 0.0]))], batch_size=16)
        stream = EpisodeStream(two_blob_spec(50), episode, seed=0)
        for batch in stream:
            assert np.all(batch.y == 0)

    def test_stream_indices_increase_without_gaps(self):
        stream = EpisodeStream(two_blob_spec(50), small_episode(2), seed=5)
        seen = []
        for batch in stream:
            seen.extend(batch.stream_indices.tolist())
        assert seen == list(range(len(seen)))

    def test_corruption_never_touches_labels(self):
        # Same seed, corrupted vs identity episodes: labels match exactly.
        noise = CorruptionSpec(kind="additive-gaussian", sigma=5.0)
        clean = CorruptionSpec(kind="additive-gaussian", sigma=0.0)
        def labels(spec):
            episode = EpisodeSpec(domains=[DomainSpec(name="d", corruption=spec,
                                                      batch_count=3)], batch_size=8)
            return np.concatenate([b.y for b in
                                   EpisodeStream(two_blob_spec(50), episode, seed=7)])
        assert np.array_equal(labels(noise), labels(clean))


class TestDatasetFile:
    def test_well_formed_file(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        lines = ['{"x": [1.0, 2.0], "y": 0}'] * 5 + ['{"x": [0.0, 1.0], "y": 1}'] * 5
        path.write_text("\n".join(lines) + "\n")
        ds = load_dataset_file(path)
        assert len(ds) == 10
        assert ds.classes == 2

    def test_wrong_dimension_names_line(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        path.write_text('{"x": [1.0, 2.0], "y": 0}\n{"x": [1.0], "y": 0}\n')
        with pytest.raises(StreamError, match=":2:"):
            load_dataset_file(path)

    def test_bad_json_names_line(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        path.write_text('{"x": [1.0], "y": 0}\nnot json\n')
        with pytest.raises(StreamError, match=":2:"):
            load_dataset_file(path)

    def test_negative_label_rejected(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        path.write_text('{"x": [1.0], "y": -1}\n')
        with pytest.raises(StreamError, match=":1:"):
            load_dataset_file(path)

    def test_round_trip(self, tmp_path):
        ds = make_source_dataset(two_blob_spec(20), seed=6)
        path = tmp_path / "ds.jsonl"
        save_dataset_file(path, ds)
        back = load_dataset_file(path)
        assert np.array_equal(back.x, ds.x)
        assert np.array_equal(back.y, ds.y)

    def test_image_payload_round_trip(self, tmp_path):
        from driftlab.stream import ImagePayload
        img = ImagePayload(data=bytes(range(16)), width=4, height=4)
        ds = Dataset(x=np.array([[1.0, 2.0]]), y=np.array([0], dtype=np.intp),
                     imgs=[img])
        path = tmp_path / "ds.jsonl"
        save_dataset_file(path, ds)
        back = load_dataset_file(path)
        assert back.imgs is not None
        assert back.imgs[0].data == img.data
        assert back.imgs[0].width == 4

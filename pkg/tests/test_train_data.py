import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtconv.checkpoint import CheckpointError, checkpoint_io, index_path, load_arrays, save_checkpoint
from mtconv.data import SyntheticSpec, gen_synthetic, sample_clip
from mtconv.network import BlockConfig, NetworkConfig, StemConfig, build_network
from mtconv.train import TrainConfig, TrainingDiverged, cosine_lr, sgd_step, train_loop


class TestCosineLR:
    def test_endpoints(self):
        cfg = TrainConfig(lr0=0.1, n_max=100)
        assert cosine_lr(0, cfg) == 0.1
        assert abs(cosine_lr(50, cfg) - 0.05) <= 1e-12
        assert abs(cosine_lr(100, cfg)) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1e-4, 10.0), st.integers(2, 10_000), st.data())
    def test_bounded_and_non_increasing(self, lr0, n_max, data):
        cfg = TrainConfig(lr0=lr0, n_max=n_max)
        a = data.draw(st.integers(0, n_max))
        b = data.draw(st.integers(a, n_max))
        assert 0.0 <= cosine_lr(b, cfg) <= cosine_lr(a, cfg) <= lr0

    def test_warmup_continuous(self):
        cfg = TrainConfig(lr0=0.2, n_max=1000, warmup_iters=50)
        peak = 0.2 * 0.5 * (math.cos(math.pi * 50 / 1000) + 1)
        assert cosine_lr(0, cfg) == 0.0
        assert cosine_lr(25, cfg) == pytest.approx(peak / 2, abs=1e-15)
        assert cosine_lr(50, cfg) == pytest.approx(peak, abs=1e-15)
        assert abs(cosine_lr(50 - 1e-9, cfg) - cosine_lr(50, cfg)) <= 1e-9
        assert abs(cosine_lr(500, cfg) - 0.1) <= 1e-12
        assert abs(cosine_lr(1000, cfg)) <= 1e-12

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(11, TrainConfig(n_max=10))


class TestSGD:
    def test_zero_everything(self):
        p = {"w": np.array([1.0, -2.0])}
        sgd_step(p, {"w": np.zeros(2)}, {}, rate=0.1, momentum=0.9, weight_decay=0.0)
        assert list(p["w"]) == [1.0, -2.0]

    def test_plain_step(self):
        p = {"w": np.array([1.0])}
        sgd_step(p, {"w": np.array([0.5])}, {}, rate=0.1, momentum=0.0, weight_decay=0.0)
        assert p["w"][0] == 1.0 - 0.1 * 0.5

    def test_two_momentum_steps(self):
        p, v = {"w": np.array([1.0])}, {}
        g, rate, mu, wd = 0.3, 0.05, 0.9, 1e-3
        w, vel = 1.0, 0.0
        for _ in range(2):
            sgd_step(p, {"w": np.array([g])}, v, rate, mu, wd)
            vel = mu * vel + g + wd * w
            w = w - rate * vel
        assert p["w"][0] == w


class TestSampling:
    def test_identity(self, rng):
        video = rng.normal(size=(3, 8, 4, 4))
        assert np.array_equal(sample_clip(video, 8), video)

    def test_strided(self):
        video = np.arange(8.0).reshape(1, 8, 1, 1)
        assert list(sample_clip(video, 4, stride=2, start=0).ravel()) == [0.0, 2.0, 4.0, 6.0]

    def test_seeded(self):
        video = np.arange(32.0).reshape(1, 32, 1, 1)
        a = sample_clip(video, 4, 2, np.random.default_rng(5))
        b = sample_clip(video, 4, 2, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_too_short_lists_length(self):
        with pytest.raises(ValueError, match="needs 7"):
            sample_clip(np.zeros((1, 6, 2, 2)), 4, stride=2)


class TestSynthetic:
    def test_noise_free_repeatable(self):
        spec = SyntheticSpec(noise=0.0, per_class=2)
        a, la = gen_synthetic(spec)
        b, lb = gen_synthetic(spec)
        assert a.tobytes() == b.tobytes() and list(la) == list(lb)

    def test_shapes_and_labels(self):
        spec = SyntheticSpec(per_class=3, frames=8, height=12, width=10)
        videos, labels = gen_synthetic(spec)
        assert videos.shape == (12, 3, 8, 12, 10)
        assert list(np.bincount(labels)) == [3, 3, 3, 3]

    def test_square_moves_at_class_speed(self):
        spec = SyntheticSpec(noise=0.0, per_class=1)
        videos, labels = gen_synthetic(spec)
        for video, label in zip(videos, labels):
            cols = [np.flatnonzero(video[0, t].any(axis=0)) for t in range(2)]
            shift = (cols[1][0] - cols[0][0]) % spec.width if len(cols[0]) < spec.width else 0
            cls = spec.classes[label]
            step = (1 if cls["direction"] == "right" else -1) * cls["speed"]
            # compare against the leftmost column of a wrapped run
            first = set(cols[0])
            moved = {(c + step) % spec.width for c in first}
            assert moved == set(cols[1]), (label, shift)


def tiny_net(seed=0):
    cfg = NetworkConfig((3, 4, 8, 8), StemConfig(4, stride=(1, 2, 2)), [BlockConfig(4, 8, delta=0.75)], 4)
    return build_network(cfg, seed)


def tiny_data(per_class=1):
    return gen_synthetic(SyntheticSpec(frames=4, height=8, width=8, square=2, per_class=per_class, seed=0))


class TestTrainLoop:
    def test_zero_rate_keeps_params(self):
        store, net = tiny_net()
        before = store.state()
        train_loop(net, tiny_data(), TrainConfig(lr0=0.0, epochs=1, batch_size=2, clip_len=4))
        assert all(before[p].tobytes() == store[p].data.tobytes() for p in store.paths())

    def test_one_sample_overfits(self):
        _, net = tiny_net()
        videos, labels = tiny_data()
        one = (videos[:1], labels[:1])
        res = train_loop(net, one, TrainConfig(lr0=0.05, epochs=60, batch_size=1, clip_len=4, weight_decay=0.0))
        losses = np.array([r.loss for r in res.history])
        blocks = losses.reshape(-1, 5).mean(axis=1)
        assert np.all(np.diff(blocks) <= 1e-12)
        assert losses[-1] <= 1e-3

    def test_history_length(self):
        _, net = tiny_net()
        res = train_loop(net, tiny_data(), TrainConfig(epochs=3, batch_size=2, clip_len=4), val=tiny_data())
        assert len(res.history) == 3
        assert res.history_csv().splitlines()[0] == "epoch,loss,train_acc,val_acc"

    def test_divergence_saves_last_finite(self, tmp_path):
        store, net = tiny_net()
        with pytest.raises(TrainingDiverged) as info, np.errstate(all="ignore"):
            train_loop(net, tiny_data(), TrainConfig(lr0=1e300, epochs=5, batch_size=2, clip_len=4),
                       out_dir=tmp_path)
        arrays = load_arrays(info.value.checkpoint)
        assert set(arrays) == set(store.paths())
        assert all(np.isfinite(a).all() for a in arrays.values())

    def test_bad_stride(self):
        with pytest.raises(ValueError):
            TrainConfig(temporal_stride=0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        store, _ = tiny_net()
        checkpoint_io(store, tmp_path / "c.mtn", "save")
        loaded = checkpoint_io(None, tmp_path / "c.mtn", "load")
        assert loaded.paths() == store.paths()
        assert all(loaded[p].data.tobytes() == store[p].data.tobytes() for p in store.paths())

    def test_truncated_names_offset(self, tmp_path):
        store, _ = tiny_net()
        path = tmp_path / "c.mtn"
        save_checkpoint(store, path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CheckpointError, match=r"byte offset \d+"):
            load_arrays(path)

    def test_missing_index(self, tmp_path):
        store, _ = tiny_net()
        save_checkpoint(store, tmp_path / "c.mtn")
        index_path(tmp_path / "c.mtn").unlink()
        with pytest.raises(CheckpointError):
            load_arrays(tmp_path / "c.mtn")

    def test_bad_direction(self, tmp_path):
        with pytest.raises(ValueError):
            checkpoint_io(None, tmp_path / "c.mtn", "upload")

    def test_index_offsets_are_tight(self, tmp_path):
        store, _ = tiny_net()
        index = save_checkpoint(store, tmp_path / "c.mtn")
        ends = sorted(e["offset"] for e in index.values())
        assert ends[0] == 0 and math.isclose(len(ends), len(store))

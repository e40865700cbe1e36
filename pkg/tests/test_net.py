import numpy as np
import pytest

from alqecg import net as _net
from alqecg.data import Dataset, EcgRecord, RECORD_SAMPLES, synth_generate, normalize_dataset
from alqecg.errors import ContainerFormatError, NumericError, ShapeError, TrainingError
from alqecg.net import (
    Network,
    NetworkSpec,
    TrainConfig,
    conv,
    default_ecgnet_spec,
    dense,
    flatten,
    flatten_params,
    init_params,
    load_checkpoint,
    out_length,
    param_count,
    param_counts,
    parameterized_layers,
    pool,
    predict_batch,
    propagate_shapes,
    save_checkpoint,
    softmax_dense,
    train,
    unflatten_params,
)
from conftest import tiny_spec

EXPECTED_COUNTS = {
    "Conv1D_1": 136, "Conv1D_2": 1164, "Conv1D_3": 3488, "Conv1D_4": 14400,
    "Conv1D_5": 20544, "Conv1D_6": 12352, "Conv1D_7": 13896,
    "Dense": 13888, "Softmax": 1105,
}


class TestArchitecture:
    def test_layer_inventory(self):
        spec = default_ecgnet_spec()
        kinds = [l.kind for l in spec.layers]
        assert kinds.count("conv1d") == 7
        assert kinds.count("maxpool1d") == 7
        assert kinds.count("flatten") == 1
        assert kinds.count("dense") == 1
        assert kinds.count("softmax-dense") == 1
        assert len(spec.layers) == 17

    def test_length_propagation(self):
        spec = default_ecgnet_spec()
        lengths = [s[1] for s in propagate_shapes(spec)]
        assert lengths == [1800, 449, 224, 111, 111, 54, 54, 26, 26, 13, 13, 6, 6, 3,
                           216, 64, 17]

    def test_param_counts(self):
        rows, total = param_counts(default_ecgnet_spec())
        assert dict(rows) == EXPECTED_COUNTS
        assert total == 80973

    def test_param_count_on_network(self):
        network = init_params(default_ecgnet_spec(), 0)
        rows, total = param_count(network)
        assert total == 80973
        got = sum(p[0].size + p[1].size for p in network.params if p is not None)
        assert got == total


class TestOutLength:
    @pytest.mark.parametrize(
        "args,expected",
        [((3600, 16, 2, 7), 1800), ((1800, 8, 4, 0), 449), ((449, 12, 2, 5), 224),
         ((111, 5, 2, 0), 54), ((100, 1, 1, 0), 100)],
    )
    def test_values(self, args, expected):
        assert out_length(*args) == expected

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            out_length(4, 8, 1, 1)

    def test_bad_params(self):
        with pytest.raises(ShapeError):
            out_length(10, 0, 1, 0)


class TestForward:
    def test_probabilities_sum_to_one(self):
        network = init_params(tiny_spec(), 0)
        rng = np.random.default_rng(1)
        probs = predict_batch(network, [rng.normal(size=8) for _ in range(5)])
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(probs >= 0) and np.all(probs <= 1)

    def test_zero_network_uniform(self):
        spec = default_ecgnet_spec()
        network = init_params(spec, 0)
        network = Network(
            spec,
            [None if p is None else (np.zeros_like(p[0]), np.zeros_like(p[1]))
             for p in network.params],
        )
        rec = EcgRecord(np.zeros(RECORD_SAMPLES), 0)
        probs = _net.forward(network, rec)
        np.testing.assert_allclose(probs, np.full(17, 1 / 17), atol=1e-12)

    def test_identity_kernel_conv(self):
        # width-1 kernel with weight 1 and zero bias passes the signal through
        x = np.random.default_rng(0).normal(size=(2, 1, 9))
        w = np.ones((1, 1, 1))
        b = np.zeros(1)
        y, _ = _net._conv_fwd(x, w, b, stride=1, padding=0)
        np.testing.assert_array_equal(y, x)

    def test_nonfinite_raises_with_layer(self):
        network = init_params(tiny_spec(), 0)
        w, b = network.params[0]
        w[0, 0, 0] = np.inf
        with pytest.raises(NumericError, match="layer 0"):
            predict_batch(network, [np.ones(8)])

    def test_channel_permutation_equivariance(self):
        # permuting conv filters and the matching dense input block is a no-op
        spec = tiny_spec()
        network = init_params(spec, 3)
        x = np.random.default_rng(2).normal(size=8)
        base = _net.forward(network, x)

        perm = [1, 0]
        w0, b0 = network.params[0]
        w3, b3 = network.params[3]
        t = 4  # pooled length per channel
        w3_perm = w3.reshape(4, 2, t)[:, perm, :].reshape(4, 2 * t)
        permuted = Network(
            spec,
            [(w0[perm], b0[perm]), None, None, (w3_perm, b3), network.params[4]],
        )
        np.testing.assert_allclose(_net.forward(permuted, x), base, atol=1e-12)


class TestGradients:
    def test_matches_central_differences(self):
        spec = tiny_spec()
        network = init_params(spec, 11)
        _, total = param_counts(spec)
        assert total <= 200
        rng = np.random.default_rng(4)
        records = [rng.normal(size=8) for _ in range(6)]
        labels = np.array([0, 1, 2, 0, 1, 2])
        grads = _net.loss_gradients(network, records, labels)

        step = 1e-4
        for idx, _name in parameterized_layers(spec):
            flat = flatten_params(network, idx)
            analytic = grads[idx]
            for j in range(flat.size):
                bumped = flat.copy()
                bumped[j] += step
                plus = _loss_with(network, idx, bumped, records, labels)
                bumped[j] -= 2 * step
                minus = _loss_with(network, idx, bumped, records, labels)
                fd = (plus - minus) / (2 * step)
                denom = max(abs(fd), abs(analytic[j]), 1e-8)
                assert abs(fd - analytic[j]) / denom <= 1e-3


def _loss_with(network, layer_index, flat, records, labels):
    params = list(network.params)
    params[layer_index] = unflatten_params(network.spec, layer_index, flat)
    return _net.batch_loss(Network(network.spec, params), records, labels)


class TestFlattenParams:
    def test_lengths(self):
        network = init_params(default_ecgnet_spec(), 0)
        assert flatten_params(network, 0).size == 136

    def test_round_trip_bitwise(self):
        network = init_params(default_ecgnet_spec(), 5)
        for idx, _ in parameterized_layers(network.spec):
            flat = flatten_params(network, idx)
            w, b = unflatten_params(network.spec, idx, flat)
            assert np.array_equal(w, network.params[idx][0])
            assert np.array_equal(b, network.params[idx][1])

    def test_dense_layout(self):
        spec = NetworkSpec(
            [flatten(), softmax_dense(2)], input_length=2, input_channels=1, class_count=2
        )
        w = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([5.0, 6.0])
        network = Network(spec, [None, (w, b)])
        np.testing.assert_array_equal(
            flatten_params(network, 1), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        )

    def test_unparameterized_layer(self):
        network = init_params(default_ecgnet_spec(), 0)
        with pytest.raises(ShapeError):
            flatten_params(network, 1)


from dataclasses import dataclass


@dataclass
class _RawRec:
    samples: np.ndarray
    label: int


@dataclass
class _RawSet:
    records: list


def _toy_training_set(n_per_class=6):
    rng = np.random.default_rng(0)
    recs = []
    for c in range(3):
        base = np.zeros(8)
        base[c * 2] = 2.0
        for _ in range(n_per_class):
            recs.append(base + 0.01 * rng.normal(size=8))
    labels = [c for c in range(3) for _ in range(n_per_class)]
    return recs, np.array(labels)


class TestTrain:
    def _dataset(self):
        ds = synth_generate(4, seed=3, noise_sigma=0.0)
        ds, _ = normalize_dataset(ds)
        return ds

    def test_loss_decreases(self):
        ds = self._dataset()
        network = init_params(default_ecgnet_spec(), 0)
        result = train(network, ds, TrainConfig(epochs=20, batch_size=17, seed=1))
        assert result.epoch_losses[-1] < result.epoch_losses[0]

    def test_zero_learning_rate_is_noop(self):
        ds = self._dataset()
        network = init_params(default_ecgnet_spec(), 2)
        for opt in ("adam", "sgd"):
            result = train(
                network, ds,
                TrainConfig(epochs=1, batch_size=32, learning_rate=0.0, seed=3,
                            optimizer=opt),
            )
            for before, after in zip(network.params, result.network.params):
                if before is None:
                    continue
                assert np.array_equal(before[0], after[0])
                assert np.array_equal(before[1], after[1])

    def test_deterministic(self):
        ds = self._dataset()
        network = init_params(default_ecgnet_spec(), 2)
        config = TrainConfig(epochs=2, batch_size=32, seed=9)
        a = train(network, ds, config)
        b = train(network, ds, config)
        assert a.epoch_losses == b.epoch_losses
        for pa, pb in zip(a.network.params, b.network.params):
            if pa is None:
                continue
            assert np.array_equal(pa[0], pb[0])
            assert np.array_equal(pa[1], pb[1])

    def test_does_not_mutate_input(self):
        ds = self._dataset()
        network = init_params(default_ecgnet_spec(), 2)
        snapshot = [None if p is None else (p[0].copy(), p[1].copy()) for p in network.params]
        train(network, ds, TrainConfig(epochs=1, batch_size=64, seed=0))
        for before, now in zip(snapshot, network.params):
            if before is None:
                continue
            assert np.array_equal(before[0], now[0])

    def test_empty_dataset(self):
        network = init_params(default_ecgnet_spec(), 0)
        with pytest.raises(TrainingError):
            train(network, Dataset([]), TrainConfig(epochs=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
    def test_divergence_names_epoch(self):
        recs, labels = _toy_training_set()
        network = init_params(tiny_spec(), 0)
        raw = _RawSet([_RawRec(r, int(l)) for r, l in zip(recs, labels)])
        with pytest.raises(TrainingError, match="epoch 0"):
            train(network, raw,
                  TrainConfig(epochs=1, batch_size=4, learning_rate=1e200, optimizer="sgd"))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        network = init_params(default_ecgnet_spec(), 8)
        path = tmp_path / "m.alqf"
        save_checkpoint(network, path)
        back = load_checkpoint(path)
        assert [l.kind for l in back.spec.layers] == [l.kind for l in network.spec.layers]
        for idx, _ in parameterized_layers(network.spec):
            expect = flatten_params(network, idx).astype(np.float32)
            got = flatten_params(back, idx).astype(np.float32)
            assert np.array_equal(expect, got)

    def test_save_load_save_identical(self, tmp_path):
        network = init_params(default_ecgnet_spec(), 8)
        p1, p2 = tmp_path / "a.alqf", tmp_path / "b.alqf"
        save_checkpoint(network, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.alqf"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(ContainerFormatError, match="bad magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        network = init_params(tiny_spec(), 0)
        path = tmp_path / "m.alqf"
        save_checkpoint(network, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ContainerFormatError, match="truncated"):
            load_checkpoint(path)

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as npst

from alqecg import net as _net
from alqecg.data import Dataset, EcgRecord
from alqecg.errors import ConfigError
from alqecg.net import Network, NetworkSpec, flatten, init_params, softmax_dense
from alqecg.quantizer import (
    AlqConfig,
    CoordScore,
    QuantGroup,
    QuantLayer,
    WeightGroup,
    alq_pipeline,
    average_bitwidth,
    canonicalize,
    dequantized_network,
    init_decompose,
    model_avg_bitwidth,
    optimize_bases,
    optimize_coords,
    partition_groups,
    prune_coordinates,
    score_coordinates,
    total_coords,
    uniform_baseline,
)
from alqecg.bitpack import serialize_bytes


def group_of(values) -> WeightGroup:
    return WeightGroup(np.asarray(values, dtype=np.float64))


def recon_error(w, q: QuantGroup) -> float:
    return float(np.linalg.norm(np.asarray(w) - q.reconstruct()))


# ---------------------------------------------------------------------------
# independent oracles


def oracle_nearest_levels(w, coords):
    """Per-position exhaustive level search with the documented tie rule."""
    rows = []
    for wj in w:
        best = None
        for signs in itertools.product((1, -1), repeat=len(coords)):
            level = sum(s * a for s, a in zip(signs, coords))
            key = (abs(wj - level), abs(level), 0 if level > 0 else 1)
            if best is None or key < best[0]:
                best = (key, signs)
        rows.append(best[1])
    return np.array(rows, dtype=np.int8)


def oracle_best_sign_matrix(w, bitwidth):
    """Global minimum reconstruction error over all sign matrices with LS coords."""
    n = len(w)
    best = np.inf
    for bits in itertools.product((1, -1), repeat=n * bitwidth):
        b = np.array(bits, dtype=np.float64).reshape(n, bitwidth)
        coords = np.linalg.pinv(b) @ w
        best = min(best, float(np.linalg.norm(w - b @ coords)))
    return best


# ---------------------------------------------------------------------------


class TestPartition:
    def test_layer_sized_vector(self):
        groups = partition_groups(np.arange(136, dtype=float), 16)
        assert len(groups) == 9
        assert [g.values.size for g in groups] == [16] * 8 + [8]

    def test_exact_division(self):
        groups = partition_groups(np.arange(32, dtype=float), 16)
        assert [g.values.size for g in groups] == [16, 16]

    def test_short_vector(self):
        groups = partition_groups(np.arange(5, dtype=float), 16)
        assert [g.values.size for g in groups] == [5]

    @settings(max_examples=50, deadline=None)
    @given(
        values=npst.arrays(np.float64, st.integers(1, 70),
                           elements=st.floats(-10, 10)),
        n=st.integers(1, 20),
    )
    def test_concatenation_restores_vector(self, values, n):
        groups = partition_groups(values, n)
        assert np.array_equal(np.concatenate([g.values for g in groups]), values)
        assert all(g.values.size == n for g in groups[:-1])
        assert 1 <= groups[-1].values.size <= n


class TestInitDecompose:
    def test_constant_group(self):
        q = init_decompose(group_of([0.7, 0.7, 0.7, 0.7]), 1)
        assert q.bitwidth == 1
        assert np.array_equal(q.bases[:, 0], [1, 1, 1, 1])
        assert q.coords[0] == pytest.approx(0.7)
        np.testing.assert_allclose(q.reconstruct(), [0.7] * 4)

    def test_hand_trace(self):
        q = init_decompose(group_of([3.0, 1.0]), 2)
        assert np.array_equal(q.bases, [[1, 1], [1, -1]])
        np.testing.assert_allclose(q.coords, [2.0, 1.0])
        np.testing.assert_allclose(q.reconstruct(), [3.0, 1.0])

    def test_zero_group(self):
        q = init_decompose(group_of([0.0, 0.0, 0.0]), 4)
        assert q.bitwidth == 0
        np.testing.assert_array_equal(q.reconstruct(), [0.0, 0.0, 0.0])

    def test_canonical_output(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            w = rng.normal(size=rng.integers(1, 17))
            q = init_decompose(WeightGroup(w), int(rng.integers(1, 5)))
            assert np.all(q.coords > 0)
            assert np.all(np.diff(q.coords) <= 0)
            cols = {q.bases[:, i].tobytes() for i in range(q.bitwidth)}
            assert len(cols) == q.bitwidth

    @settings(max_examples=60, deadline=None)
    @given(
        values=npst.arrays(np.float64, st.integers(1, 16),
                           elements=st.floats(-5, 5, allow_subnormal=False)),
        i_max=st.integers(1, 6),
    )
    def test_residual_norm_strictly_decreases(self, values, i_max):
        w = values
        r = w.copy()
        prev = np.linalg.norm(r)
        for _ in range(i_max):
            alpha = np.abs(r).mean()
            if alpha <= 1e-12:
                break
            r = r - alpha * np.where(r >= 0, 1.0, -1.0)
            now = np.linalg.norm(r)
            assert now < prev or prev == 0.0
            prev = now
        q = init_decompose(WeightGroup(w), i_max)
        assert recon_error(w, q) <= np.linalg.norm(w) + 1e-12


class TestOptimizeBases:
    def test_two_coordinate_levels(self):
        q = QuantGroup(np.array([[1, 1], [1, 1]], dtype=np.int8), np.array([2.0, 1.0]))
        out = optimize_bases(group_of([2.9, -0.8]), q)
        levels = out.bases.astype(float) @ out.coords
        np.testing.assert_allclose(levels, [3.0, -1.0])
        assert out.bases[0].tolist() == [1, 1]
        assert out.bases[1].tolist() == [-1, 1]

    def test_fixed_point(self):
        q = init_decompose(group_of([3.0, 1.0]), 2)
        out = optimize_bases(group_of([3.0, 1.0]), q)
        assert np.array_equal(out.bases, q.bases)
        np.testing.assert_allclose(out.reconstruct(), [3.0, 1.0])

    def test_tie_breaks_positive(self):
        q = QuantGroup(np.array([[-1]], dtype=np.int8), np.array([1.0]))
        out = optimize_bases(group_of([0.0]), q)
        assert out.bases[0, 0] == 1

    def test_tie_breaks_smaller_magnitude(self):
        # w = 2 sits exactly between levels 1 and 3; the smaller level wins
        q = QuantGroup(np.array([[1, 1]], dtype=np.int8), np.array([2.0, 1.0]))
        out = optimize_bases(group_of([2.0]), q)
        level = float(out.bases.astype(float)[0] @ out.coords)
        assert level == 1.0

    def test_rejects_wide_groups(self):
        q = QuantGroup(np.ones((4, 17), dtype=np.int8), np.linspace(17, 1, 17))
        with pytest.raises(ConfigError, match="enumeration"):
            optimize_bases(group_of([0.0, 0.0, 0.0, 0.0]), q)

    def test_matches_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            n = int(rng.integers(1, 7))
            i = int(rng.integers(1, 3))
            w = rng.normal(size=n) * rng.uniform(0.1, 3)
            q = init_decompose(WeightGroup(w), i)
            if q.bitwidth == 0:
                continue
            out = optimize_bases(WeightGroup(w), q)
            assert np.array_equal(out.bases, oracle_nearest_levels(w, q.coords))


class TestOptimizeCoords:
    def test_normal_equations_hand_example(self):
        q = QuantGroup(np.array([[1, 1], [1, -1]], dtype=np.int8), np.array([1.0, 0.5]))
        out = optimize_coords(group_of([3.0, 1.0]), q)
        np.testing.assert_allclose(out.coords, [2.0, 1.0])

    def test_duplicate_columns_min_norm(self):
        q = QuantGroup(np.array([[1, 1], [1, 1]], dtype=np.int8), np.array([1.0, 0.5]))
        out = optimize_coords(group_of([3.0, 1.0]), q)
        # merged into a single column whose reconstruction equals
        # the single-column least-squares fit
        assert out.bitwidth == 1
        np.testing.assert_allclose(out.reconstruct(), [2.0, 2.0])

    def test_negative_coordinate_flips_column(self):
        q = QuantGroup(np.array([[1, 1], [1, -1]], dtype=np.int8), np.array([1.0, 1.0]))
        out = optimize_coords(group_of([0.5, 1.5]), q)
        assert np.all(out.coords > 0)
        np.testing.assert_allclose(out.reconstruct(), [0.5, 1.5])

    def test_never_increases_error(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            n = int(rng.integers(1, 17))
            w = rng.normal(size=n)
            q = init_decompose(WeightGroup(w), int(rng.integers(1, 5)))
            if q.bitwidth == 0:
                continue
            before = recon_error(w, q)
            q2 = optimize_bases(WeightGroup(w), q)
            mid = recon_error(w, q2)
            assert mid <= before + 0.0
            q3 = optimize_coords(WeightGroup(w), q2)
            assert recon_error(w, q3) <= mid

    def test_matches_pinv_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            n = int(rng.integers(1, 10))
            i = int(rng.integers(1, 4))
            w = rng.normal(size=n)
            bases = rng.choice([-1, 1], size=(n, i)).astype(np.int8)
            coords = np.sort(rng.uniform(0.1, 2, size=i))[::-1]
            q = QuantGroup(bases, coords)
            out = optimize_coords(WeightGroup(w), q)
            oracle = bases.astype(float) @ (np.linalg.pinv(bases.astype(float)) @ w)
            err_out = recon_error(w, out)
            err_oracle = float(np.linalg.norm(w - oracle))
            assert err_out <= err_oracle + 1e-8


class TestRefinementVsExhaustive:
    def test_alternating_beats_exhaustive_floor_sanity(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            n = int(rng.integers(2, 7))
            i = int(rng.integers(1, 3))
            w = rng.normal(size=n)
            q = init_decompose(WeightGroup(w), i)
            init_err = recon_error(w, q)
            for _ in range(3):
                if q.bitwidth == 0:
                    break
                q = optimize_bases(WeightGroup(w), q)
                q = optimize_coords(WeightGroup(w), q)
            refined_err = recon_error(w, q)
            assert refined_err <= init_err + 1e-12
            floor = oracle_best_sign_matrix(w, i)
            assert floor <= refined_err + 1e-9


class TestAverageBitwidth:
    def _layer(self, sizes, bits):
        groups = [
            QuantGroup(np.ones((n, b), dtype=np.int8) if b else np.zeros((n, 0), np.int8),
                       np.linspace(b, 1, b))
            for n, b in zip(sizes, bits)
        ]
        return QuantLayer(groups, max(sizes), sum(sizes), 0)

    def test_group_mean(self):
        layer = self._layer([8, 8, 8, 8], [2, 1, 1, 0])
        mean, weighted = average_bitwidth(layer)
        assert mean == pytest.approx(1.0)
        assert weighted == pytest.approx(1.0)

    def test_weighted_mean_with_tail(self):
        layer = self._layer([16, 8], [1, 2])
        mean, weighted = average_bitwidth(layer)
        assert mean == pytest.approx(1.5)
        assert weighted == pytest.approx((16 + 16) / 24)

    def test_equal_bits_degenerate(self):
        layer = self._layer([16, 16], [3, 3])
        mean, weighted = average_bitwidth(layer)
        assert mean == weighted == pytest.approx(3.0)


def toy_quant_net(eps=1e-3):
    """9-parameter dense net: exact decomposition plus one tiny extra column.

    Every full-size coordinate carries a margin-critical chunk of the
    classifier, so its removal visibly hurts the calibration loss; the
    injected eps column is negligible for both the estimator and the
    exhaustive-removal oracle.
    """
    spec = NetworkSpec([flatten(), softmax_dense(3)],
                       input_length=2, input_channels=1, class_count=3)
    # flat layout [w00,w01,w10,w11 | w20,w21,b0,b1 | b2], groups of 4
    g0 = QuantGroup(
        np.array([[1, 1], [1, -1], [-1, 1], [1, -1]], dtype=np.int8),
        np.array([2.0, eps]),
    )
    g1 = init_decompose(group_of([2.0, -2.0, 0.5, -0.5]), 2)  # exact: [1.25, 0.75]
    g2 = init_decompose(group_of([0.0]), 2)  # empty
    qlayers = [QuantLayer([g0, g1, g2], 4, 9, 1)]
    network = dequantized_network(spec, qlayers)
    return network, qlayers


def toy_calib() -> Dataset:
    recs = [
        _Rec([1.0, 1.0], 0), _Rec([-1.0, 1.0], 1), _Rec([1.0, -1.0], 2),
        _Rec([1.2, 0.8], 0), _Rec([-0.8, 1.2], 1), _Rec([0.8, -1.2], 2),
    ]
    return Dataset(recs, class_count=3)


class _Rec:
    """Short-signal stand-in for EcgRecord in toy-network tests."""

    def __init__(self, samples, label):
        self.samples = np.asarray(samples, dtype=np.float64)
        self.label = label


class TestScoring:
    def test_magnitude_example(self):
        q = QuantGroup(
            np.ones((16, 2), dtype=np.int8) * np.array([1, -1], dtype=np.int8),
            np.array([2.0, 0.001]),
        )
        layer = QuantLayer([q], 16, 16, 0)
        scores = score_coordinates([layer], None, None, "magnitude")
        by_coord = {s.coord: s.score for s in scores}
        assert by_coord[0] == pytest.approx(8.0)
        assert by_coord[1] == pytest.approx(0.004)

    def test_loss_aware_matches_exhaustive_removal(self):
        network, qlayers = toy_quant_net()
        calib = toy_calib()
        scores = score_coordinates(qlayers, network, calib, "loss_aware")
        ranked = sorted(scores, key=lambda s: (s.score, s.magnitude, s.layer, s.group, s.coord))
        predicted = (ranked[0].layer, ranked[0].group, ranked[0].coord)

        base_labels = calib.labels()
        best = None
        for s in scores:
            trial = [
                QuantLayer(
                    [QuantGroup(g.bases.copy(), g.coords.copy()) for g in ql.groups],
                    ql.group_size, ql.param_count, ql.layer_index)
                for ql in qlayers
            ]
            g = trial[s.layer].groups[s.group]
            keep = [c for c in range(g.bitwidth) if c != s.coord]
            trial[s.layer].groups[s.group] = QuantGroup(g.bases[:, keep], g.coords[keep])
            deq = dequantized_network(network.spec, trial)
            loss = _net.batch_loss(deq, calib.records, base_labels)
            key = (loss, s.magnitude, s.layer, s.group, s.coord)
            if best is None or key < best[0]:
                best = (key, (s.layer, s.group, s.coord))
        assert predicted == best[1]

    def test_loss_aware_requires_calib(self):
        network, qlayers = toy_quant_net()
        with pytest.raises(ConfigError, match="calibration"):
            score_coordinates(qlayers, network, None, "loss_aware")

    def test_deterministic(self):
        network, qlayers = toy_quant_net()
        calib = toy_calib()
        a = score_coordinates(qlayers, network, calib, "loss_aware")
        b = score_coordinates(qlayers, network, calib, "loss_aware")
        assert a == b


class TestPrune:
    def _two_group_layers(self):
        g1 = QuantGroup(
            np.sign(np.random.default_rng(0).normal(size=(16, 2))).astype(np.int8),
            np.array([2.0, 0.001]),
        )
        g2 = QuantGroup(
            np.sign(np.random.default_rng(1).normal(size=(16, 2))).astype(np.int8),
            np.array([1.25, 0.75]),
        )
        g1b, g1c = canonicalize(g1.bases, g1.coords)
        g2b, g2c = canonicalize(g2.bases, g2.coords)
        layers = [QuantLayer([QuantGroup(g1b, g1c), QuantGroup(g2b, g2c)], 16, 32, 0)]
        scores = score_coordinates(layers, None, None, "magnitude")
        return layers, scores

    def test_rate_zero_noop(self):
        layers, scores = self._two_group_layers()
        out = prune_coordinates(layers, scores, rate=0.0)
        assert serialize_layers(out) == serialize_layers(layers)

    def test_rate_one_empties_everything(self):
        layers, scores = self._two_group_layers()
        out = prune_coordinates(layers, scores, rate=1.0)
        assert all(g.bitwidth == 0 for ql in out for g in ql.groups)
        assert model_avg_bitwidth(out) == 0.0
        for ql in out:
            for g in ql.groups:
                np.testing.assert_array_equal(g.reconstruct(), np.zeros(g.size))

    def test_lowest_score_removed_first(self):
        layers, scores = self._two_group_layers()
        out = prune_coordinates(layers, scores, rate=0.25)  # one of four coords
        assert out[0].groups[0].bitwidth == 1
        assert out[0].groups[0].coords[0] == pytest.approx(2.0)
        assert out[0].groups[1].bitwidth == 2

    def test_target_bitwidth(self):
        layers, scores = self._two_group_layers()
        out = prune_coordinates(layers, scores, target_avg_bitwidth=1.0)
        assert model_avg_bitwidth(out) <= 1.0

    def test_target_already_met_noop(self, caplog):
        layers, scores = self._two_group_layers()
        with caplog.at_level("INFO"):
            out = prune_coordinates(layers, scores, target_avg_bitwidth=5.0)
        assert serialize_layers(out) == serialize_layers(layers)
        assert any("already met" in r.message for r in caplog.records)

    def test_tie_break_order(self):
        # equal scores: magnitude, then (layer, group, coord) decide
        g = QuantGroup(np.array([[1, -1], [1, 1]], dtype=np.int8), np.array([1.0, 0.5]))
        layers = [QuantLayer([g], 2, 2, 0)]
        scores = [
            CoordScore(0, 0, 0, 1.0, 0.3),
            CoordScore(0, 0, 1, 1.0, 0.7),
        ]
        out = prune_coordinates(layers, scores, rate=0.5)
        # coordinate 0 had the lower magnitude and is removed despite equal score
        assert out[0].groups[0].bitwidth == 1
        assert out[0].groups[0].coords[0] == pytest.approx(0.5)

    def test_monotone_in_rate(self):
        rng = np.random.default_rng(9)
        flat = rng.normal(size=128)
        groups = partition_groups(flat, 16)
        qgroups = [init_decompose(g, 3) for g in groups]
        layers = [QuantLayer(qgroups, 16, flat.size, 0)]
        scores = score_coordinates(layers, None, None, "magnitude")
        prev_bits = np.inf
        for rate in [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]:
            out = prune_coordinates(layers, scores, rate=rate)
            bits = sum(g.size * g.bitwidth for ql in out for g in ql.groups)
            assert bits <= prev_bits
            prev_bits = bits


def serialize_layers(layers):
    return [
        (ql.layer_index, [(g.bases.tobytes(), g.coords.tobytes()) for g in ql.groups])
        for ql in layers
    ]


class TestPipeline:
    def test_lossless_regime_small_net(self):
        from conftest import tiny_spec
        from alqecg.qinfer import QuantExecutor, dequantize

        network = init_params(tiny_spec(), 21)
        snapped = dequantize(uniform_baseline(network, 1, 16))
        config = AlqConfig(group_size=16, i_max=2, prune_rate=0.0, scorer="magnitude",
                           refine_iters=0, seed=0)
        model, report = alq_pipeline(snapped, None, config)
        deq = dequantize(model)
        for idx, _ in _net.parameterized_layers(snapped.spec):
            np.testing.assert_allclose(
                _net.flatten_params(deq, idx), _net.flatten_params(snapped, idx),
                atol=1e-6,
            )
        rng = np.random.default_rng(0)
        records = [rng.normal(size=8) for _ in range(20)]
        qlog = QuantExecutor(model).logits(records)
        flog = _net.logits_batch(snapped, records)
        assert np.abs(qlog - flog).max() <= 1e-5

    def test_deterministic(self):
        network = init_params(NetworkSpec(
            [flatten(), softmax_dense(4)], input_length=8, input_channels=1,
            class_count=4), 3)
        config = AlqConfig(group_size=8, i_max=3, prune_rate=0.3, scorer="magnitude",
                           refine_iters=2, seed=5)
        a, _ = alq_pipeline(network, None, config)
        b, _ = alq_pipeline(network, None, config)
        assert serialize_bytes(a) == serialize_bytes(b)

    def test_report_tracks_bits_and_loss(self):
        network, _ = toy_quant_net()
        config = AlqConfig(group_size=4, i_max=2, prune_rate=0.5, scorer="loss_aware",
                           refine_iters=1, seed=0)
        model, report = alq_pipeline(network, toy_calib(), config)
        assert report.avg_bitwidth_pruned <= report.avg_bitwidth_init
        assert report.avg_bitwidth_final <= report.avg_bitwidth_pruned + 1e-12
        assert report.pruned_coords > 0
        assert report.calib_loss_init is not None
        assert report.calib_loss_pruned >= report.calib_loss_init - 1e-9


class TestUniformBaseline:
    def test_single_bit(self):
        network = init_params(NetworkSpec(
            [flatten(), softmax_dense(3)], input_length=4, input_channels=1,
            class_count=3), 0)
        model = uniform_baseline(network, 1, 8)
        assert all(g.bitwidth == 1 for ql in model.layers for g in ql.groups)

    def test_error_monotone_in_bits(self):
        network = init_params(NetworkSpec(
            [flatten(), softmax_dense(3)], input_length=4, input_channels=1,
            class_count=3), 1)
        prev = np.inf
        for i in [1, 2, 4, 8]:
            model = uniform_baseline(network, i, 8)
            err = 0.0
            for ql in model.layers:
                flat = _net.flatten_params(network, ql.layer_index)
                recon = np.concatenate([g.reconstruct() for g in ql.groups])
                err += float(np.sum((flat - recon) ** 2))
            assert err <= prev + 1e-15
            prev = err

    def test_deterministic(self):
        network = init_params(NetworkSpec(
            [flatten(), softmax_dense(3)], input_length=4, input_channels=1,
            class_count=3), 2)
        assert serialize_bytes(uniform_baseline(network, 2, 8)) == serialize_bytes(
            uniform_baseline(network, 2, 8)
        )


class TestConfig:
    def test_json_round_trip(self, tmp_path):
        path = tmp_path / "alq.json"
        path.write_text(
            '{"group_size": 8, "i_max": {"default": 2, "Softmax": 4},'
            ' "prune": {"target_avg_bitwidth": 1.5}, "scorer": "magnitude",'
            ' "refine_iters": 1, "calib_batch": 32, "seed": 9}'
        )
        config = AlqConfig.from_json_file(path)
        assert config.group_size == 8
        assert config.i_max_for("Softmax") == 4
        assert config.i_max_for("Conv1D_1") == 2
        assert config.target_avg_bitwidth == 1.5
        assert config.seed == 9

    def test_bad_rate(self):
        with pytest.raises(ConfigError, match=r"prune.rate must be in \[0,1\)"):
            AlqConfig(prune_rate=1.5)

    def test_conflicting_targets(self):
        with pytest.raises(ConfigError):
            AlqConfig(prune_rate=0.5, target_avg_bitwidth=1.0)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "alq.json"
        path.write_text('{"group_sizes": 8}')
        with pytest.raises(ConfigError, match="unknown config keys"):
            AlqConfig.from_json_file(path)

    def test_digest_stable(self):
        assert AlqConfig().digest() == AlqConfig().digest()
        assert AlqConfig().digest() != AlqConfig(seed=1).digest()

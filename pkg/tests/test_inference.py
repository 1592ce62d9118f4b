import numpy as np
import pytest

from deltazip.compress import (
    SPARSITY_2_4,
    SPARSITY_NONE,
    CalibrationSet,
    CompressConfig,
    compress_model,
    compute_hessian,
    dequantize_layer,
    obs_compress_layer,
)
from deltazip.core import Rng, WeightStack, gaussian_matrix
from deltazip.errors import PartitionError, ShapeError, UnknownDeltaError
from deltazip.inference import (
    BatchInput,
    DeltaHandle,
    TpLayout,
    decoupled_linear,
    forward_model,
    group_by_delta,
    sbmm,
    tp_forward,
    tp_partition,
)

CFG = CompressConfig(bits=4, sparsity=SPARSITY_2_4)


def _layer_delta(rows, cols, seed, scale=0.01):
    rng = Rng(seed)
    delta = gaussian_matrix(rng, rows, cols, scale)
    calib = CalibrationSet(gaussian_matrix(rng, cols, 2 * cols, 1.0))
    return obs_compress_layer(delta, compute_hessian(calib, 0.01), CFG)


def _zero_delta(rows, cols):
    h = np.eye(cols)
    return obs_compress_layer(np.zeros((rows, cols)), h, CFG)


class TestDecoupledLinear:
    def test_zero_delta(self):
        rng = Rng(1)
        w = gaussian_matrix(rng, 8, 8, 1.0)
        x = gaussian_matrix(rng, 8, 3, 1.0)
        out = decoupled_linear(w, _zero_delta(8, 8), x)
        assert np.array_equal(out, w @ x)

    def test_hand_example(self):
        ld = obs_compress_layer(
            np.array([[0.5, 0.0], [0.0, 0.0]]),
            np.eye(2),
            CompressConfig(bits=16, sparsity=SPARSITY_NONE),
        )
        out = decoupled_linear(np.eye(2), ld, np.array([1.0, 2.0]))
        assert np.allclose(out, [1.5, 2.0])

    def test_merged_oracle(self):
        for t in range(30):
            rng = Rng(100 + t)
            w = gaussian_matrix(rng, 12, 12, 0.5)
            ld = _layer_delta(12, 12, 200 + t)
            x = gaussian_matrix(rng, 12, 1, 1.0)[:, 0]
            merged = (w + dequantize_layer(ld)) @ x
            assert np.abs(decoupled_linear(w, ld, x) - merged).max() <= 1e-9

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            decoupled_linear(np.eye(3), _zero_delta(2, 2), np.ones(2))


class TestGroupByDelta:
    def test_spec_example(self):
        batch = BatchInput([(i, d, np.zeros(2)) for i, d in enumerate([2, 0, 2, 1])])
        perm, groups = group_by_delta(batch)
        # sorted order of original indices is [1, 3, 0, 2]
        assert perm == [2, 0, 3, 1]
        assert groups == [(0, 0, 1), (1, 1, 2), (2, 2, 4)]

    def test_single_delta_identity(self):
        batch = BatchInput([(i, 5, np.zeros(2)) for i in range(4)])
        perm, groups = group_by_delta(batch)
        assert perm == [0, 1, 2, 3]
        assert groups == [(5, 0, 4)]

    def test_empty(self):
        perm, groups = group_by_delta(BatchInput([]))
        assert perm == []
        assert groups == []

    def test_stable_sort_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            ids = rng.integers(0, 5, size=int(rng.integers(0, 12))).tolist()
            batch = BatchInput([(i, d, np.zeros(1)) for i, d in enumerate(ids)])
            perm, _ = group_by_delta(batch)
            expected_order = sorted(range(len(ids)), key=lambda i: ids[i])
            for orig, pos in enumerate(perm):
                assert expected_order[pos] == orig


class TestSbmm:
    def test_singleton_reduces_to_decoupled(self):
        rng = Rng(30)
        w = gaussian_matrix(rng, 8, 8, 0.5)
        ld = _layer_delta(8, 8, 31)
        x = gaussian_matrix(rng, 8, 1, 1.0)[:, 0]
        out = sbmm(w, {7: ld}, BatchInput([(42, 7, x)]))
        assert np.array_equal(out[42], decoupled_linear(w, ld, x))

    def test_multi_delta_bit_exact_loop_oracle(self):
        rng = Rng(32)
        w = gaussian_matrix(rng, 8, 8, 0.5)
        deltas = {d: _layer_delta(8, 8, 40 + d) for d in range(3)}
        rows = [
            (0, 0, gaussian_matrix(Rng(50), 8, 1, 1.0)[:, 0]),
            (1, 1, gaussian_matrix(Rng(51), 8, 1, 1.0)[:, 0]),
            (2, 2, gaussian_matrix(Rng(52), 8, 1, 1.0)[:, 0]),
            (3, 2, gaussian_matrix(Rng(53), 8, 1, 1.0)[:, 0]),
        ]
        out = sbmm(w, deltas, BatchInput(rows))
        for rid, did, x in rows:
            assert np.array_equal(out[rid], decoupled_linear(w, deltas[did], x))

    def test_unused_delta_ok(self):
        rng = Rng(33)
        w = gaussian_matrix(rng, 4, 4, 0.5)
        deltas = {0: _zero_delta(4, 4), 1: _zero_delta(4, 4)}
        out = sbmm(w, deltas, BatchInput([(0, 0, np.ones(4))]))
        assert set(out) == {0}

    def test_unknown_delta(self):
        with pytest.raises(UnknownDeltaError):
            sbmm(np.eye(4), {0: _zero_delta(4, 4)}, BatchInput([(0, 9, np.ones(4))]))

    def test_order_preservation(self):
        rng = Rng(34)
        w = gaussian_matrix(rng, 8, 8, 0.5)
        deltas = {d: _layer_delta(8, 8, 60 + d) for d in range(2)}
        rows = [(i, i % 2, gaussian_matrix(Rng(70 + i), 8, 1, 1.0)[:, 0]) for i in range(5)]
        out = sbmm(w, deltas, BatchInput(rows))
        shuffled = [rows[i] for i in (3, 0, 4, 2, 1)]
        out2 = sbmm(w, deltas, BatchInput(shuffled))
        for rid in out:
            assert np.array_equal(out[rid], out2[rid])


class TestTpPartition:
    def test_column_split(self):
        shards = tp_partition(np.arange(4.0).reshape(2, 2), "column", 2)
        assert len(shards) == 2 and shards[0].shape == (2, 1)

    def test_row_split(self):
        shards = tp_partition(np.arange(8.0).reshape(4, 2), "row", 2)
        assert len(shards) == 2 and shards[0].shape == (2, 2)

    def test_not_divisible(self):
        with pytest.raises(PartitionError):
            tp_partition(np.zeros((2, 3)), "column", 2)


class TestTpForward:
    def test_single_worker_matches_decoupled(self):
        rng = Rng(80)
        w = gaussian_matrix(rng, 8, 8, 0.5)
        ld = _layer_delta(8, 8, 81)
        dq = dequantize_layer(ld)
        x = gaussian_matrix(rng, 8, 3, 1.0)
        # Row-major activations with transposed weights compute the same layer.
        out = tp_forward(tp_partition(w.T, "column", 1), tp_partition(dq.T, "column", 1), x.T, "column")
        assert np.abs(out.T - decoupled_linear(w, ld, x)).max() <= 1e-9

    @pytest.mark.parametrize("n", [1, 2, 4])
    def test_two_layer_stack_equivalence(self, n):
        rng = Rng(90 + n)
        w1 = gaussian_matrix(rng, 8, 16, 0.4)
        d1 = gaussian_matrix(rng, 8, 16, 0.01)
        w2 = gaussian_matrix(rng, 16, 8, 0.4)
        d2 = gaussian_matrix(rng, 16, 8, 0.01)
        x = gaussian_matrix(rng, 5, 8, 1.0)
        y = tp_forward(tp_partition(w1, "column", n), tp_partition(d1, "column", n), x, "column")
        z = tp_forward(tp_partition(w2, "row", n), tp_partition(d2, "row", n), y, "row")
        ref = (x @ (w1 + d1)) @ (w2 + d2)
        assert np.linalg.norm(z - ref) / np.linalg.norm(ref) <= 1e-9

    def test_zero_delta_shards(self):
        rng = Rng(95)
        w = gaussian_matrix(rng, 6, 8, 0.4)
        x = gaussian_matrix(rng, 3, 6, 1.0)
        z = np.zeros_like(w)
        out = tp_forward(tp_partition(w, "column", 2), tp_partition(z, "column", 2), x, "column")
        assert np.allclose(out, x @ w)

    def test_layout_mismatch(self):
        w = np.zeros((4, 4))
        with pytest.raises(PartitionError):
            tp_forward(tp_partition(w, "column", 2), tp_partition(w, "column", 2), np.zeros((2, 3)), "column")


def _paired_stacks(seed, layers=3, dim=12):
    rng = Rng(seed)
    std = 1.0 / np.sqrt(dim)
    base, fine = [], []
    for i in range(layers):
        w = gaussian_matrix(rng, dim, dim, std)
        d = gaussian_matrix(rng, dim, dim, 0.02 * std)
        base.append((f"l{i}", w))
        fine.append((f"l{i}", w + d))
    return WeightStack(fine), WeightStack(base)


class TestForwardModel:
    def test_zero_deltas_match_base_forward(self):
        _, base = _paired_stacks(100)
        handles = {0: DeltaHandle(0, [_zero_delta(12, 12) for _ in range(3)])}
        x = gaussian_matrix(Rng(101), 12, 1, 1.0)[:, 0]
        out = forward_model(base, handles, BatchInput([(0, 0, x)]))
        ref = base.forward_tanh(x.reshape(-1, 1))[:, 0]
        assert np.abs(out[0] - ref).max() <= 1e-12

    def test_lossless_delta_matches_finetuned_forward(self):
        ft, base = _paired_stacks(102)
        calib = CalibrationSet(gaussian_matrix(Rng(103), 12, 8, 1.0))
        cd = compress_model(ft, base, calib, CompressConfig(bits=16, sparsity=SPARSITY_NONE))
        handles = {0: DeltaHandle.from_compressed(0, cd)}
        x = gaussian_matrix(Rng(104), 12, 1, 1.0)[:, 0]
        out = forward_model(base, handles, BatchInput([(0, 0, x)]))
        ref = ft.forward_tanh(x.reshape(-1, 1))[:, 0]
        assert np.abs(out[0] - ref).max() <= 1e-9

    def test_mixed_batch_equals_independent_forwards(self):
        ft0, base = _paired_stacks(105)
        handles = {}
        for d in range(3):
            ftd, _ = _paired_stacks(106 + d)
            calib = CalibrationSet(gaussian_matrix(Rng(120 + d), 12, 8, 1.0))
            cd = compress_model(ftd, base, calib, CFG)
            handles[d] = DeltaHandle.from_compressed(d, cd)
        rows = [(i, i % 3, gaussian_matrix(Rng(130 + i), 12, 1, 1.0)[:, 0]) for i in range(6)]
        out = forward_model(base, handles, BatchInput(rows))
        for rid, did, x in rows:
            solo = forward_model(base, {did: handles[did]}, BatchInput([(rid, did, x)]))
            assert np.array_equal(out[rid], solo[rid])

    def test_tp_layout_equivalence(self):
        ft, base = _paired_stacks(140, layers=2, dim=12)
        calib = CalibrationSet(gaussian_matrix(Rng(141), 12, 8, 1.0))
        cd = compress_model(ft, base, calib, CFG)
        handles = {0: DeltaHandle.from_compressed(0, cd)}
        x = gaussian_matrix(Rng(142), 12, 1, 1.0)[:, 0]
        batch = BatchInput([(0, 0, x)])
        plain = forward_model(base, handles, batch)
        tp = forward_model(base, handles, batch, layout=TpLayout(2, ("column", "row")))
        assert np.abs(plain[0] - tp[0]).max() <= 1e-9

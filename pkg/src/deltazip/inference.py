"""Decoupled base+delta forward computation and tensor-parallel partitioning.

The fine-tuned matmul (w_base + delta) @ x is split into a shared base part
and a per-variant delta part; results merge after every linear layer, which is
exact because the split is linear. Deltas stay packed at rest and are
dequantized once per grouped application, never merged into the base weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compress import CompressedDelta, LayerDelta, dequantize_layer
from .core import AXIS_COLUMN, AXIS_ROW, Matrix, WeightStack, as_matrix
from .errors import PartitionError, ShapeError, UnknownDeltaError


@dataclass
class DeltaHandle:
    """A loaded delta: packed per-layer payloads addressed by a serving id."""

    delta_id: int
    layers: list[LayerDelta]

    @classmethod
    def from_compressed(cls, delta_id: int, cd: CompressedDelta) -> "DeltaHandle":
        return cls(delta_id=delta_id, layers=list(cd.layers))

    def validate_against(self, stack: WeightStack) -> None:
        if len(self.layers) != len(stack):
            raise ShapeError(
                f"delta {self.delta_id} has {len(self.layers)} layers, stack has {len(stack)}"
            )
        for ld, (name, w) in zip(self.layers, stack.layers):
            if (ld.rows, ld.cols) != w.shape:
                raise ShapeError(
                    f"delta {self.delta_id} layer {ld.name!r} shape "
                    f"({ld.rows}, {ld.cols}) does not match base layer {name!r} {w.shape}"
                )


@dataclass
class BatchInput:
    """One inference micro-batch: (request_id, delta_id, input vector) rows."""

    rows: list[tuple[int, int, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        norm = []
        dim = None
        for rid, did, x in self.rows:
            x = np.asarray(x, dtype=np.float64).reshape(-1)
            if dim is None:
                dim = x.shape[0]
            elif x.shape[0] != dim:
                raise ShapeError(
                    f"request {rid}: input dim {x.shape[0]} != batch dim {dim}"
                )
            norm.append((int(rid), int(did), x))
        self.rows = norm

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class TpLayout:
    """Worker count plus the partition axis of every layer."""

    n_workers: int
    axes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n_workers < 1:
            raise PartitionError("n_workers must be >= 1")
        for ax in self.axes:
            if ax not in (AXIS_COLUMN, AXIS_ROW):
                raise PartitionError(f"unknown partition axis {ax!r}")


def _as_input(x, dim: int) -> tuple[Matrix, bool]:
    """Normalize x (vector or matrix of column samples) for w @ x."""
    arr = np.asarray(x, dtype=np.float64)
    was_vector = arr.ndim == 1
    if was_vector:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[0] != dim:
        raise ShapeError(f"input shape {np.asarray(x).shape} incompatible with dim {dim}")
    return arr, was_vector


def decoupled_linear(w_base: Matrix, delta_layer: LayerDelta, x) -> np.ndarray:
    """w_base @ x + dequantized(delta) @ x, never materializing the merged weight."""
    w_base = as_matrix(w_base, "w_base")
    if (delta_layer.rows, delta_layer.cols) != w_base.shape:
        raise ShapeError(
            f"delta shape ({delta_layer.rows}, {delta_layer.cols}) != base {w_base.shape}"
        )
    xm, was_vector = _as_input(x, w_base.shape[1])
    out = w_base @ xm + dequantize_layer(delta_layer) @ xm
    return out[:, 0] if was_vector else out


def group_by_delta(batch: BatchInput) -> tuple[list[int], list[tuple[int, int, int]]]:
    """Stable sort of batch rows by delta id.

    Returns (permutation, groups): permutation[i] is the sorted position of
    original row i; groups are (delta_id, start, end) over sorted positions.
    """
    order = sorted(range(len(batch.rows)), key=lambda i: batch.rows[i][1])
    perm = [0] * len(order)
    for sorted_pos, orig in enumerate(order):
        perm[orig] = sorted_pos
    groups: list[tuple[int, int, int]] = []
    for pos, orig in enumerate(order):
        did = batch.rows[orig][1]
        if groups and groups[-1][0] == did:
            groups[-1] = (did, groups[-1][1], pos + 1)
        else:
            groups.append((did, pos, pos + 1))
    return perm, groups


def sbmm(base_layer: Matrix, deltas, batch: BatchInput) -> dict[int, np.ndarray]:
    """Grouped multi-delta matmul: y_i = base @ x_i + delta[idx_i] @ x_i.

    Requests are reordered so rows of the same delta form one contiguous group
    and each delta is dequantized exactly once. Per-request products keep the
    same evaluation order as decoupled_linear, so outputs match a per-request
    loop bit for bit.
    """
    base_layer = as_matrix(base_layer, "base_layer")
    for rid, did, _ in batch.rows:
        if did not in deltas:
            raise UnknownDeltaError(f"request {rid} references unknown delta {did}")

    perm, groups = group_by_delta(batch)
    order = [0] * len(perm)
    for orig, sorted_pos in enumerate(perm):
        order[sorted_pos] = orig

    out: dict[int, np.ndarray] = {}
    for did, start, end in groups:
        dq = dequantize_layer(deltas[did])
        if dq.shape != base_layer.shape:
            raise ShapeError(
                f"delta {did} shape {dq.shape} != base layer {base_layer.shape}"
            )
        for pos in range(start, end):
            rid, _, x = batch.rows[order[pos]]
            out[rid] = base_layer @ x + dq @ x
    return {rid: out[rid] for rid, _, _ in batch.rows}


# ---------------------------------------------------------------------------
# Tensor parallelism
# ---------------------------------------------------------------------------


def tp_partition(w: Matrix, axis: str, n: int) -> list[Matrix]:
    """Split into n contiguous column blocks or row blocks."""
    w = as_matrix(w, "w")
    if n < 1:
        raise PartitionError("worker count must be >= 1")
    if axis == AXIS_COLUMN:
        if w.shape[1] % n != 0:
            raise PartitionError(f"{w.shape[1]} columns not divisible by {n} workers")
        step = w.shape[1] // n
        return [w[:, i * step : (i + 1) * step].copy() for i in range(n)]
    if axis == AXIS_ROW:
        if w.shape[0] % n != 0:
            raise PartitionError(f"{w.shape[0]} rows not divisible by {n} workers")
        step = w.shape[0] // n
        return [w[i * step : (i + 1) * step, :].copy() for i in range(n)]
    raise PartitionError(f"unknown partition axis {axis!r}")


def tp_forward(
    base_shards: list[Matrix],
    delta_shards: list[Matrix],
    x: Matrix,
    axis: str,
) -> Matrix:
    """Partitioned forward of one linear layer on row-major activations.

    x has one token per row. Column-split shards produce independent output
    slices that concatenate; row-split shards consume matching input slices
    and their partial outputs sum (the simulated all-reduce).
    """
    if len(base_shards) != len(delta_shards):
        raise PartitionError(
            f"{len(base_shards)} base shards vs {len(delta_shards)} delta shards"
        )
    n = len(base_shards)
    x = as_matrix(x, "x")
    for wb, wd in zip(base_shards, delta_shards):
        if wb.shape != wd.shape:
            raise PartitionError(f"shard shape mismatch {wb.shape} vs {wd.shape}")

    if axis == AXIS_COLUMN:
        if x.shape[1] != base_shards[0].shape[0]:
            raise PartitionError(
                f"activation dim {x.shape[1]} != shard rows {base_shards[0].shape[0]}"
            )
        parts = [x @ wb + x @ wd for wb, wd in zip(base_shards, delta_shards)]
        return np.concatenate(parts, axis=1)

    if axis == AXIS_ROW:
        rows_total = sum(wb.shape[0] for wb in base_shards)
        if x.shape[1] != rows_total:
            raise PartitionError(
                f"activation dim {x.shape[1]} != summed shard rows {rows_total}"
            )
        out = None
        start = 0
        for wb, wd in zip(base_shards, delta_shards):
            xs = x[:, start : start + wb.shape[0]]
            start += wb.shape[0]
            part = xs @ wb + xs @ wd
            out = part if out is None else out + part
        return out

    raise PartitionError(f"unknown partition axis {axis!r}")


# ---------------------------------------------------------------------------
# Full-model forward
# ---------------------------------------------------------------------------


def _tp_grouped_linear(
    w: Matrix, dq: Matrix, xs: Matrix, axis: str, n_workers: int
) -> Matrix:
    """Layer output via TP shards; xs holds column samples, w computes w @ x.

    The partitioned kernel works on row-major activations with transposed
    weights, so a column-parallel tag splits the layer's output dimension.
    """
    shards_b = tp_partition(w.T, axis, n_workers)
    shards_d = tp_partition(dq.T, axis, n_workers)
    return tp_forward(shards_b, shards_d, xs.T, axis).T


def forward_model(
    base: WeightStack,
    deltas,
    batch: BatchInput,
    layout: TpLayout | None = None,
) -> dict[int, np.ndarray]:
    """Multi-variant forward pass with per-layer base/delta merging.

    Each linear layer runs as a grouped multi-delta matmul; base and delta
    contributions merge before the elementwise tanh between layers.
    """
    for rid, did, _ in batch.rows:
        if did not in deltas:
            raise UnknownDeltaError(f"request {rid} references unknown delta {did}")
        deltas[did].validate_against(base)
    if layout is not None and layout.axes and len(layout.axes) != len(base):
        raise PartitionError("layout must carry one axis per layer")

    current = {rid: x for rid, _, x in batch.rows}
    n_layers = len(base)
    for li, (_, w) in enumerate(base.layers):
        use_tp = layout is not None and layout.n_workers > 1
        if use_tp:
            axis = layout.axes[li] if layout.axes else base.axes[li]
            outputs: dict[int, np.ndarray] = {}
            layer_rows = [(rid, did, current[rid]) for rid, did, _ in batch.rows]
            perm, groups = group_by_delta(BatchInput(layer_rows))
            order = [0] * len(perm)
            for orig, pos in enumerate(perm):
                order[pos] = orig
            for did, start, end in groups:
                dq = dequantize_layer(deltas[did].layers[li])
                xs = np.stack(
                    [layer_rows[order[p]][2] for p in range(start, end)], axis=1
                )
                ys = _tp_grouped_linear(w, dq, xs, axis, layout.n_workers)
                for k, p in enumerate(range(start, end)):
                    outputs[layer_rows[order[p]][0]] = ys[:, k]
        else:
            layer_batch = BatchInput([(rid, did, current[rid]) for rid, did, _ in batch.rows])
            layer_deltas = {did: deltas[did].layers[li] for _, did, _ in batch.rows}
            outputs = sbmm(w, layer_deltas, layer_batch)
        if li + 1 < n_layers:
            outputs = {rid: np.tanh(y) for rid, y in outputs.items()}
        current = outputs
    return current

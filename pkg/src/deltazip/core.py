"""Dense matrix primitives, deterministic RNG, and model containers.

All numeric work happens in 64-bit floats on row-major (C-order) 2-D numpy
arrays. Quantized storage widths are defined by the compression module, not
here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

Matrix = np.ndarray

AXIS_COLUMN = "column"
AXIS_ROW = "row"


def as_matrix(a, name: str = "matrix") -> Matrix:
    """Validate and normalize an array-like into a 2-D float64 C-order array."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must have at least one row and column, got {m.shape}")
    return m


class Rng:
    """Counter-based deterministic random stream.

    Identical seeds produce identical streams; every randomized operation in
    the package draws from an explicit Rng so results are pure functions of
    (seed, parameters).
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape, stddev: float = 1.0) -> np.ndarray:
        if stddev == 0.0:
            return np.zeros(shape, dtype=np.float64)
        return self._gen.normal(0.0, stddev, size=shape)

    def exponential(self, mean: float) -> float:
        return float(self._gen.exponential(mean))

    def lognormal(self, mean_log: float, sigma: float) -> float:
        return float(self._gen.lognormal(mean_log, sigma))

    def choice(self, n: int, p=None) -> int:
        return int(self._gen.choice(n, p=p))

    def integers(self, low: int, high: int) -> int:
        return int(self._gen.integers(low, high))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product with 64-bit accumulation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def gaussian_matrix(rng: Rng, rows: int, cols: int, stddev: float) -> Matrix:
    """I.i.d. normal matrix, deterministic per rng seed and draw order."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"invalid matrix shape ({rows}, {cols})")
    if stddev < 0:
        raise ValueError(f"stddev must be nonnegative, got {stddev}")
    return rng.normal((rows, cols), stddev)


def frobenius_distance(a: Matrix, b: Matrix) -> float:
    """sqrt of the sum of squared elementwise differences."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


@dataclass
class WeightStack:
    """Ordered list of named linear-layer weight matrices.

    Layer n computes Y = W_n @ X, so consecutive layers must satisfy
    rows(W_n) == cols(W_{n+1}). Each layer carries a partition-axis tag
    ("column" or "row") used by tensor-parallel serving.
    """

    layers: list[tuple[str, Matrix]]
    axes: list[str] = field(default_factory=list)

    def __post_init__(self):
        names = [n for n, _ in self.layers]
        if len(set(names)) != len(names):
            raise ShapeError("layer names must be unique")
        self.layers = [(n, as_matrix(w, f"layer {n!r}")) for n, w in self.layers]
        for (n0, w0), (n1, w1) in zip(self.layers, self.layers[1:]):
            if w1.shape[1] != w0.shape[0]:
                raise ShapeError(
                    f"layer {n1!r} input dim {w1.shape[1]} does not match "
                    f"layer {n0!r} output dim {w0.shape[0]}"
                )
        if not self.axes:
            self.axes = [AXIS_COLUMN] * len(self.layers)
        if len(self.axes) != len(self.layers):
            raise ShapeError("one axis tag required per layer")
        for ax in self.axes:
            if ax not in (AXIS_COLUMN, AXIS_ROW):
                raise ShapeError(f"unknown partition axis {ax!r}")

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.layers]

    @property
    def weights(self) -> list[Matrix]:
        return [w for _, w in self.layers]

    def input_dim(self) -> int:
        return self.layers[0][1].shape[1]

    def forward(self, x: Matrix) -> Matrix:
        """Chained linear forward pass (no activation): W_N @ ... @ W_1 @ X."""
        y = as_matrix(x, "x")
        for _, w in self.layers:
            y = matmul(w, y)
        return y

    def forward_tanh(self, x: Matrix) -> Matrix:
        """Forward pass with tanh between layers (none after the last)."""
        y = as_matrix(x, "x")
        for i, (_, w) in enumerate(self.layers):
            y = matmul(w, y)
            if i + 1 < len(self.layers):
                y = np.tanh(y)
        return y

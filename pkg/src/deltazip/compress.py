"""Calibrated delta compression: 2:4 pruning, group quantization, packing.

The layer solver processes columns left to right in blocks. For each column it
freezes a value (pruned to zero or snapped to the quantization grid) and
distributes the induced error over the remaining columns through the inverse
Hessian, so that the calibration-weighted reconstruction error stays minimal.
Every whole-model pass reconstructs the full layer weight (base + dequantized
delta) before propagating calibration inputs to the next layer; propagating
through the bare delta instead collapses the activations after a few layers
and starves the solver of signal.
"""

from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .core import Matrix, WeightStack, as_matrix
from .errors import (
    CalibrationError,
    EncodingError,
    FormatError,
    NumericDomainError,
    ShapeError,
)

SPARSITY_NONE = "none"
SPARSITY_2_4 = "two_of_four"

LOSSLESS_OFF = "off"
LOSSLESS_DEFLATE = "deflate"

VALID_BITS = (2, 3, 4, 8, 16)

SOLVER_OBS = "obs"


@dataclass(frozen=True)
class CompressConfig:
    bits: int = 4
    sparsity: str = SPARSITY_2_4
    group_size: int = 128
    damping: float = 0.01
    block_size: int = 32
    lossless: str = LOSSLESS_OFF
    solver: str = SOLVER_OBS  # hook for alternative layer solvers

    def __post_init__(self):
        if self.solver != SOLVER_OBS:
            raise ValueError(f"solver {self.solver!r} is not implemented")
        if self.bits not in VALID_BITS:
            raise ValueError(f"bits must be one of {VALID_BITS}, got {self.bits}")
        if self.sparsity not in (SPARSITY_NONE, SPARSITY_2_4):
            raise ValueError(f"unknown sparsity {self.sparsity!r}")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.sparsity == SPARSITY_2_4 and self.block_size % 4 != 0:
            raise ValueError("block_size must be a multiple of 4 for 2:4 sparsity")
        if self.damping < 0:
            raise ValueError("damping must be nonnegative")
        if self.lossless not in (LOSSLESS_OFF, LOSSLESS_DEFLATE):
            raise ValueError(f"unknown lossless codec {self.lossless!r}")

    @property
    def is_passthrough(self) -> bool:
        return self.bits == 16


@dataclass
class CalibrationSet:
    """Per-sample input vectors, one column per sample."""

    samples: Matrix

    def __post_init__(self):
        self.samples = as_matrix(self.samples, "calibration samples")

    @property
    def input_dim(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def fingerprint(self) -> int:
        """64-bit content hash used to tie a compressed delta to its calibration."""
        h = hashlib.sha256()
        h.update(np.asarray(self.samples.shape, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.samples, dtype="<f8").tobytes())
        return int.from_bytes(h.digest()[:8], "little")


@dataclass
class LayerDelta:
    """Packed compressed delta for one layer.

    packed_values holds the quantized codes (kept positions only under 2:4),
    index_stream the 2-bit within-group positions of kept elements, and scales
    one 32-bit real per (row, column-group). With bits=16 the quantizer is an
    identity and packed_values carries the raw 64-bit values instead of codes.
    """

    name: str
    rows: int
    cols: int
    packed_values: np.ndarray
    index_stream: bytes
    scales: np.ndarray
    bits: int
    sparsity: str
    group_size: int
    proxy_loss: float = field(default=0.0, compare=False)

    def __post_init__(self):
        self.packed_values = np.ascontiguousarray(self.packed_values, dtype="<u4")
        self.scales = np.ascontiguousarray(self.scales, dtype="<f4")

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayerDelta):
            return NotImplemented
        return (
            self.name == other.name
            and self.rows == other.rows
            and self.cols == other.cols
            and self.bits == other.bits
            and self.sparsity == other.sparsity
            and self.group_size == other.group_size
            and np.array_equal(self.packed_values, other.packed_values)
            and self.index_stream == other.index_stream
            and np.array_equal(self.scales, other.scales)
        )

    @property
    def n_groups(self) -> int:
        return math.ceil(self.cols / self.group_size)


@dataclass
class CompressedDelta:
    base_model_id: str
    layers: list[LayerDelta]
    config: CompressConfig
    calibration_fingerprint: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, CompressedDelta):
            return NotImplemented
        return (
            self.base_model_id == other.base_model_id
            and self.config == other.config
            and self.calibration_fingerprint == other.calibration_fingerprint
            and self.layers == other.layers
        )


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------


def extract_delta(w_f: Matrix, w_b: Matrix) -> Matrix:
    """Elementwise difference between fine-tuned and base weights."""
    w_f = as_matrix(w_f, "w_f")
    w_b = as_matrix(w_b, "w_b")
    if w_f.shape != w_b.shape:
        raise ShapeError(f"shape mismatch {w_f.shape} vs {w_b.shape}")
    return w_f - w_b


def compute_hessian(calib: CalibrationSet, damping: float) -> Matrix:
    """Proxy Hessian H = X X^T + damping * mean(diag(X X^T)) * I."""
    if damping < 0:
        raise ValueError("damping must be nonnegative")
    x = calib.samples
    h = x @ x.T
    mean_diag = float(np.mean(np.diag(h)))
    h[np.diag_indices_from(h)] += damping * mean_diag
    return h


def prune_mask_2of4(group_w, hinv_diag) -> np.ndarray:
    """Keep-mask over a group of 4 contiguous weights.

    Prunes the pair minimizing the summed saliency w^2 / hinv_diag; ties break
    toward the lexicographically smallest pruned index pair.
    """
    w = np.asarray(group_w, dtype=np.float64).reshape(-1)
    hd = np.asarray(hinv_diag, dtype=np.float64).reshape(-1)
    if w.shape != (4,) or hd.shape != (4,):
        raise ShapeError("prune_mask_2of4 expects groups of exactly 4 values")
    if np.any(hd <= 0):
        raise NumericDomainError("inverse-Hessian diagonal entries must be positive")
    return _keep_mask_groups(w[None, :], hd[None, :])[0]


def _keep_mask_groups(w4: np.ndarray, hinv_diag: np.ndarray) -> np.ndarray:
    """Vectorized 2:4 keep-mask for (n, 4) weight groups.

    Stable argsort picks the two smallest saliencies per row, which matches
    the lexicographically-smallest-pruned-pair tie break.
    """
    saliency = w4 * w4 / hinv_diag
    order = np.argsort(saliency, axis=1, kind="stable")
    keep = np.ones(w4.shape, dtype=bool)
    rows = np.arange(w4.shape[0])
    keep[rows, order[:, 0]] = False
    keep[rows, order[:, 1]] = False
    return keep


def quantize_group(values, bits: int) -> tuple[np.ndarray, float]:
    """Symmetric round-to-nearest quantization of one value group.

    Returns integer codes in [-qmax, qmax] and the (32-bit) scale. All-zero
    groups get scale 0 and all-zero codes, which dequantize back to zero.
    """
    if not 2 <= bits <= 16:
        raise ValueError(f"bits must be in [2, 16], got {bits}")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    qmax = (1 << (bits - 1)) - 1
    max_abs = float(np.max(np.abs(v))) if v.size else 0.0
    # Scales are stored as 32-bit reals; round here so later dequantization
    # uses the exact stored value.
    scale = float(np.float32(max_abs / qmax)) if max_abs > 0 else 0.0
    if scale == 0.0:
        return np.zeros(v.shape, dtype=np.int64), 0.0
    codes = np.clip(np.rint(v / scale), -qmax, qmax).astype(np.int64)
    return codes, scale


def dequantize_codes(codes: np.ndarray, scale: float) -> np.ndarray:
    return codes.astype(np.float64) * scale


def pack_codes(codes, bits: int) -> np.ndarray:
    """Pack signed codes into little-endian 32-bit words.

    Codes are offset to unsigned (u = code + qmax) and laid out least
    significant bits first, 32 // bits codes per word, final word zero-padded.
    """
    if not 2 <= bits <= 16:
        raise ValueError(f"bits must be in [2, 16], got {bits}")
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    qmax = (1 << (bits - 1)) - 1
    if codes.size and (codes.min() < -qmax or codes.max() > qmax):
        raise EncodingError(f"codes out of range [-{qmax}, {qmax}] for {bits}-bit packing")
    per_word = 32 // bits
    u = (codes + qmax).astype(np.uint64)
    n_words = math.ceil(codes.size / per_word) if codes.size else 0
    padded = np.zeros(n_words * per_word, dtype=np.uint64)
    padded[: codes.size] = u
    shifts = np.arange(per_word, dtype=np.uint64) * np.uint64(bits)
    words = (padded.reshape(n_words, per_word) << shifts[None, :]).sum(axis=1)
    return (words & np.uint64(0xFFFFFFFF)).astype("<u4")


def unpack_codes(words: np.ndarray, bits: int, count: int) -> np.ndarray:
    """Inverse of pack_codes: recover `count` signed codes."""
    if not 2 <= bits <= 16:
        raise ValueError(f"bits must be in [2, 16], got {bits}")
    words = np.asarray(words, dtype=np.uint32)
    per_word = 32 // bits
    if count > words.size * per_word:
        raise EncodingError(f"cannot unpack {count} codes from {words.size} words")
    qmax = (1 << (bits - 1)) - 1
    mask = np.uint64((1 << bits) - 1)
    shifts = np.arange(per_word, dtype=np.uint64) * np.uint64(bits)
    u = (words.astype(np.uint64)[:, None] >> shifts[None, :]) & mask
    return u.reshape(-1)[:count].astype(np.int64) - qmax


def encode_mask_indices(keep: np.ndarray) -> bytes:
    """2-bit position codes of the two kept elements of each 4-column group.

    Groups are scanned row-major; each group contributes one nibble holding
    the smaller kept position in the low 2 bits. Nibbles fill bytes low first.
    """
    rows, cols = keep.shape
    groups = keep.reshape(rows * (cols // 4), 4)
    pos = np.nonzero(groups)[1].reshape(-1, 2)
    nibbles = (pos[:, 0] | (pos[:, 1] << 2)).astype(np.uint8)
    if nibbles.size % 2:
        nibbles = np.append(nibbles, np.uint8(0))
    return (nibbles[0::2] | (nibbles[1::2] << 4)).tobytes()


def decode_mask_indices(data: bytes, rows: int, cols: int) -> np.ndarray:
    """Rebuild the boolean keep-mask from a 2-bit index stream."""
    n_groups = rows * (cols // 4)
    expected = math.ceil(n_groups / 2)
    if len(data) != expected:
        raise FormatError(f"index stream length {len(data)} != expected {expected}")
    raw = np.frombuffer(data, dtype=np.uint8)
    nibbles = np.empty(raw.size * 2, dtype=np.uint8)
    nibbles[0::2] = raw & 0x0F
    nibbles[1::2] = raw >> 4
    nibbles = nibbles[:n_groups]
    p0 = nibbles & 0x3
    p1 = nibbles >> 2
    if np.any(p0 >= p1):
        raise FormatError("corrupt index stream: kept positions not strictly increasing")
    keep = np.zeros((n_groups, 4), dtype=bool)
    grp = np.arange(n_groups)
    keep[grp, p0] = True
    keep[grp, p1] = True
    return keep.reshape(rows, cols)


# ---------------------------------------------------------------------------
# Layer solver
# ---------------------------------------------------------------------------


def _inverse_cholesky_factor(hessian: Matrix, name: str) -> np.ndarray:
    """Upper Cholesky factor U with H^-1 = U^T U.

    U[i, i]^2 equals the leading diagonal of the inverse Hessian restricted to
    columns i.. (the quantity the greedy column solver needs), and row i of U
    carries the error-propagation coefficients.
    """
    try:
        c, low = sla.cho_factor(hessian, lower=True, check_finite=False)
        hinv = sla.cho_solve((c, low), np.eye(hessian.shape[0]), check_finite=False)
        return sla.cholesky(hinv, lower=False, check_finite=False)
    except (np.linalg.LinAlgError, sla.LinAlgError, ValueError) as exc:
        raise NumericDomainError(
            f"hessian for layer {name!r} is not positive definite: {exc}"
        ) from exc


def _float64_payload(values: np.ndarray) -> np.ndarray:
    return np.frombuffer(np.ascontiguousarray(values, dtype="<f8").tobytes(), dtype="<u4")


def _float64_unpayload(words: np.ndarray, count: int) -> np.ndarray:
    vals = np.frombuffer(np.ascontiguousarray(words, dtype="<u4").tobytes(), dtype="<f8")
    return vals[:count].copy()


def obs_compress_layer(
    delta: Matrix, hessian: Matrix, cfg: CompressConfig, name: str = "layer"
) -> LayerDelta:
    """Greedy column-by-column compression of one layer delta.

    Columns are processed left to right in blocks; each finalized column's
    error is pushed onto the not-yet-processed columns via the inverse-Hessian
    Cholesky factor. 2:4 masks are chosen per 4-column group by minimal
    saliency, and surviving values snap to a per-(row, group) symmetric grid.
    """
    delta = as_matrix(delta, "delta")
    hessian = as_matrix(hessian, "hessian")
    r, c = delta.shape
    if hessian.shape != (c, c):
        raise ShapeError(f"hessian shape {hessian.shape} does not match delta cols {c}")

    sparse = cfg.sparsity == SPARSITY_2_4
    if sparse and c % 4 != 0:
        raise ShapeError(f"layer {name!r}: 2:4 sparsity needs cols divisible by 4, got {c}")

    if cfg.is_passthrough and not sparse:
        # Identity quantizer, no pruning: store the raw values.
        return LayerDelta(
            name=name,
            rows=r,
            cols=c,
            packed_values=_float64_payload(delta),
            index_stream=b"",
            scales=np.zeros(0, dtype="<f4"),
            bits=cfg.bits,
            sparsity=cfg.sparsity,
            group_size=cfg.group_size,
            proxy_loss=0.0,
        )

    u = _inverse_cholesky_factor(hessian, name)
    u_diag = np.diag(u)

    gs = cfg.group_size
    n_groups = math.ceil(c / gs)
    qmax = (1 << (cfg.bits - 1)) - 1

    w = delta.copy()
    keep = np.ones((r, c), dtype=bool)
    codes = np.zeros((r, c), dtype=np.int64)
    quantized = np.zeros((r, c), dtype=np.float64)
    scales = np.zeros((r, n_groups), dtype=np.float64)
    proxy_loss = 0.0

    for i1 in range(0, c, cfg.block_size):
        i2 = min(i1 + cfg.block_size, c)
        w1 = w[:, i1:i2].copy()
        err1 = np.zeros_like(w1)

        for i in range(i2 - i1):
            col = i1 + i
            d = u_diag[col]

            if not cfg.is_passthrough and col % gs == 0:
                g = col // gs
                seg = w[:, col : min(col + gs, c)]
                max_abs = np.max(np.abs(seg), axis=1)
                # 32-bit scales; snap now so stored and applied scales agree.
                scales[:, g] = np.float64(np.float32(max_abs / qmax))

            if sparse and col % 4 == 0:
                hd = u_diag[col : col + 4] ** 2
                keep[:, col : col + 4] = _keep_mask_groups(w1[:, i : i + 4], hd)

            wc = w1[:, i]
            kc = keep[:, col]
            if cfg.is_passthrough:
                qc = np.where(kc, wc, 0.0)
            else:
                s = scales[:, col // gs]
                code = np.zeros(r, dtype=np.int64)
                nz = (s > 0) & kc
                code[nz] = np.clip(np.rint(wc[nz] / s[nz]), -qmax, qmax).astype(np.int64)
                codes[:, col] = code
                qc = code.astype(np.float64) * s

            quantized[:, col] = qc
            err = (wc - qc) / d
            proxy_loss += float(np.sum((wc - qc) ** 2) / (d * d))
            w1[:, i + 1 :] -= np.outer(err, u[col, col + 1 : i2])
            err1[:, i] = err

        w[:, i1:i2] = quantized[:, i1:i2]
        if i2 < c:
            w[:, i2:] -= err1 @ u[i1:i2, i2:]

    if sparse:
        index_stream = encode_mask_indices(keep)
        if cfg.is_passthrough:
            packed = _float64_payload(quantized[keep])
        else:
            packed = pack_codes(codes[keep], cfg.bits)
    else:
        index_stream = b""
        packed = pack_codes(codes.reshape(-1), cfg.bits)

    # Identity quantizer stores raw values; an empty scale table marks it.
    scales_out = (
        np.zeros(0, dtype="<f4") if cfg.is_passthrough else scales.astype("<f4").reshape(-1)
    )
    return LayerDelta(
        name=name,
        rows=r,
        cols=c,
        packed_values=packed,
        index_stream=index_stream,
        scales=scales_out,
        bits=cfg.bits,
        sparsity=cfg.sparsity,
        group_size=cfg.group_size,
        proxy_loss=proxy_loss,
    )


def dequantize_layer(ld: LayerDelta) -> Matrix:
    """Reconstruct the dense float64 delta matrix from its packed form."""
    r, c = ld.rows, ld.cols
    sparse = ld.sparsity == SPARSITY_2_4

    if sparse:
        keep = decode_mask_indices(ld.index_stream, r, c)
        n_kept = r * c // 2
    else:
        keep = None
        n_kept = r * c

    if ld.bits == 16 and ld.scales.size == 0:
        vals = _float64_unpayload(ld.packed_values, n_kept)
    else:
        codes = unpack_codes(ld.packed_values, ld.bits, n_kept).astype(np.float64)
        gs = ld.group_size
        scale_grid = ld.scales.astype(np.float64).reshape(r, ld.n_groups)
        col_group = np.arange(c) // gs
        per_elem = scale_grid[:, col_group]
        if sparse:
            vals = codes * per_elem[keep]
        else:
            return (codes.reshape(r, c) * per_elem).astype(np.float64)

    out = np.zeros((r, c), dtype=np.float64)
    if sparse:
        out[keep] = vals
    else:
        out[:] = vals.reshape(r, c)
    return out


def layer_calibration_loss(delta: Matrix, delta_hat: Matrix, calib: CalibrationSet) -> float:
    """Calibration-weighted reconstruction objective ||(D - D~) X||_F^2."""
    err = (as_matrix(delta) - as_matrix(delta_hat)) @ calib.samples
    return float(np.sum(err * err))


# ---------------------------------------------------------------------------
# Whole-model pass
# ---------------------------------------------------------------------------


def compress_model(
    w_f: WeightStack,
    w_b: WeightStack,
    calib: CalibrationSet,
    cfg: CompressConfig,
    base_model_id: str = "base",
) -> CompressedDelta:
    """Compress every layer delta, propagating calibration inputs through the
    reconstructed (base + dequantized delta) weights."""
    if len(w_f) != len(w_b):
        raise ShapeError(f"stack depth mismatch: {len(w_f)} vs {len(w_b)}")
    for (nf, wf), (nb, wb) in zip(w_f.layers, w_b.layers):
        if wf.shape != wb.shape:
            raise ShapeError(f"layer {nf!r}/{nb!r} shape mismatch {wf.shape} vs {wb.shape}")
    if calib.input_dim != w_b.input_dim():
        raise ShapeError(
            f"calibration dim {calib.input_dim} does not match layer 0 input "
            f"dim {w_b.input_dim()}"
        )

    x = calib.samples
    layers: list[LayerDelta] = []
    for (name, wf), (_, wb) in zip(w_f.layers, w_b.layers):
        if not np.any(x):
            raise CalibrationError(f"calibration inputs vanished at layer {name!r}")
        delta = extract_delta(wf, wb)
        hessian = compute_hessian(CalibrationSet(x), cfg.damping)
        ld = obs_compress_layer(delta, hessian, cfg, name=name)
        reconstructed = dequantize_layer(ld) + wb
        x = reconstructed @ x
        layers.append(ld)

    return CompressedDelta(
        base_model_id=base_model_id,
        layers=layers,
        config=cfg,
        calibration_fingerprint=calib.fingerprint(),
    )


# ---------------------------------------------------------------------------
# Lossless byte codec (pluggable deflate-family)
# ---------------------------------------------------------------------------


def lossless_encode(data: bytes) -> bytes:
    return zlib.compress(data, level=6)


def lossless_decode(data: bytes) -> bytes:
    try:
        return zlib.decompress(data)
    except zlib.error as exc:
        raise FormatError(f"corrupt lossless stream: {exc}") from exc

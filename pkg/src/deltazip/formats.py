"""Binary containers: DZDL (compressed delta) and DZWT (weight stack).

Both formats are little-endian throughout. DZDL carries a JSON header with
the compression configuration followed by per-layer records; DZWT is a plain
list of named float32 matrices used for synthetic model fixtures and
calibration sets.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .compress import (
    LOSSLESS_DEFLATE,
    LOSSLESS_OFF,
    CompressConfig,
    CompressedDelta,
    LayerDelta,
    lossless_decode,
    lossless_encode,
)
from .core import WeightStack
from .errors import FormatError

DELTA_MAGIC = b"DZDL"
STACK_MAGIC = b"DZWT"
DELTA_VERSION = 1
STACK_VERSION = 1
FLAG_LOSSLESS = 0x1


class _Reader:
    """Cursor over a byte buffer that reports offsets in errors."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", offset=self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _write_delta_stream(cd: CompressedDelta, out: io.BufferedIOBase) -> None:
    lossless = cd.config.lossless == LOSSLESS_DEFLATE
    flags = FLAG_LOSSLESS if lossless else 0
    header = {
        "base_model_id": cd.base_model_id,
        "bits": cd.config.bits,
        "sparsity": cd.config.sparsity,
        "group_size": cd.config.group_size,
        "layer_count": len(cd.layers),
        "calibration_fingerprint": cd.calibration_fingerprint,
        "damping": cd.config.damping,
        "block_size": cd.config.block_size,
        "codec": LOSSLESS_DEFLATE if lossless else LOSSLESS_OFF,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    out.write(DELTA_MAGIC)
    out.write(struct.pack("<HH", DELTA_VERSION, flags))
    out.write(struct.pack("<I", len(header_bytes)))
    out.write(header_bytes)

    for ld in cd.layers:
        name = ld.name.encode("utf-8")
        out.write(struct.pack("<H", len(name)))
        out.write(name)
        out.write(struct.pack("<II", ld.rows, ld.cols))
        scale_bytes = ld.scales.astype("<f4").tobytes()
        out.write(struct.pack("<I", len(scale_bytes)))
        out.write(scale_bytes)
        out.write(struct.pack("<I", len(ld.index_stream)))
        out.write(ld.index_stream)
        payload = ld.packed_values.astype("<u4").tobytes()
        if lossless:
            payload = lossless_encode(payload)
        out.write(struct.pack("<I", len(payload)))
        out.write(payload)


def write_delta(cd: CompressedDelta, path) -> None:
    with open(path, "wb") as f:
        _write_delta_stream(cd, f)


def read_delta(path) -> CompressedDelta:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != DELTA_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DELTA_MAGIC!r}", offset=0)
    version = r.u16("version")
    if version != DELTA_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    flags = r.u16("flags")
    lossless = bool(flags & FLAG_LOSSLESS)
    header_len = r.u32("header length")
    try:
        header = json.loads(r.take(header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad header json: {exc}", offset=12) from exc

    try:
        cfg = CompressConfig(
            bits=header["bits"],
            sparsity=header["sparsity"],
            group_size=header["group_size"],
            damping=header.get("damping", 0.01),
            block_size=header.get("block_size", 32),
            lossless=LOSSLESS_DEFLATE if lossless else LOSSLESS_OFF,
        )
        layer_count = header["layer_count"]
        base_model_id = header["base_model_id"]
        fingerprint = header["calibration_fingerprint"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"invalid header: {exc}", offset=12) from exc

    layers = []
    for _ in range(layer_count):
        name_len = r.u16("layer name length")
        name = r.take(name_len, "layer name").decode("utf-8")
        rows = r.u32("rows")
        cols = r.u32("cols")
        scales_len = r.u32("scales length")
        scales = np.frombuffer(r.take(scales_len, "scales"), dtype="<f4")
        index_len = r.u32("index length")
        index_stream = r.take(index_len, "index stream")
        payload_len = r.u32("payload length")
        payload = r.take(payload_len, "payload")
        if lossless:
            payload = lossless_decode(payload)
        if len(payload) % 4:
            raise FormatError("payload not a whole number of 32-bit words", offset=r.pos)
        layers.append(
            LayerDelta(
                name=name,
                rows=rows,
                cols=cols,
                packed_values=np.frombuffer(payload, dtype="<u4"),
                index_stream=index_stream,
                scales=scales,
                bits=cfg.bits,
                sparsity=cfg.sparsity,
                group_size=cfg.group_size,
            )
        )
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last layer", offset=r.pos)
    return CompressedDelta(
        base_model_id=base_model_id,
        layers=layers,
        config=cfg,
        calibration_fingerprint=fingerprint,
    )


@dataclass
class LayerSizes:
    name: str
    rows: int
    cols: int
    scales_bytes: int
    index_bytes: int
    payload_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.scales_bytes + self.index_bytes + self.payload_bytes

    @property
    def dense16_bytes(self) -> int:
        return self.rows * self.cols * 2


def inspect_delta(path) -> tuple[dict, list[LayerSizes], float]:
    """Header dict, per-layer stored sizes, and the measured compression ratio
    of the whole file against a dense 16-bit baseline."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4, "magic") != DELTA_MAGIC:
        raise FormatError("bad magic", offset=0)
    r.u16("version")
    r.u16("flags")
    header_len = r.u32("header length")
    header = json.loads(r.take(header_len, "header").decode("utf-8"))
    sizes = []
    for _ in range(header["layer_count"]):
        name_len = r.u16("layer name length")
        name = r.take(name_len, "layer name").decode("utf-8")
        rows = r.u32("rows")
        cols = r.u32("cols")
        scales_len = r.u32("scales length")
        r.take(scales_len, "scales")
        index_len = r.u32("index length")
        r.take(index_len, "index stream")
        payload_len = r.u32("payload length")
        r.take(payload_len, "payload")
        sizes.append(LayerSizes(name, rows, cols, scales_len, index_len, payload_len))
    dense = sum(s.dense16_bytes for s in sizes)
    ratio = dense / len(data) if data else 0.0
    return header, sizes, ratio


# ---------------------------------------------------------------------------
# DZWT weight stacks
# ---------------------------------------------------------------------------


def write_stack(stack: WeightStack, path) -> None:
    with open(path, "wb") as f:
        f.write(STACK_MAGIC)
        f.write(struct.pack("<H", STACK_VERSION))
        f.write(struct.pack("<I", len(stack)))
        for name, w in stack.layers:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<II", w.shape[0], w.shape[1]))
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def read_stack(path) -> WeightStack:
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != STACK_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {STACK_MAGIC!r}", offset=0)
    version = r.u16("version")
    if version != STACK_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    count = r.u32("layer count")
    layers = []
    for _ in range(count):
        name_len = r.u16("layer name length")
        name = r.take(name_len, "layer name").decode("utf-8")
        rows = r.u32("rows")
        cols = r.u32("cols")
        payload = r.take(rows * cols * 4, f"layer {name!r} payload")
        w = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, cols)
        layers.append((name, w))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes", offset=r.pos)
    return WeightStack(layers)

"""Bit-packed container for quantized models plus memory accounting.

``ALQQ`` layout, all little-endian:

* magic ``ALQQ``, u16 version
* network descriptor (shared with the checkpoint format), then model meta:
  u64 creation seed and the 32-byte config digest
* u16 group size
* per parameterized layer: u32 group count, then per group u16 size, u8
  bitwidth, the coordinates as f32, and one packed sign column per retained
  bit. Columns pack LSB-first: bit b of byte j holds the sign of weight
  position 8j+b (+1 -> 1), each column padded to a whole byte.

The memory accounting mirrors the usual multi-bit storage convention:
the headline figure counts sign bits only (params x average bitwidth),
coordinate overhead (32 bits per retained coordinate) and the exact
container size are reported separately. 1 KB = 1024 bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import net as _net
from .errors import ContainerFormatError
from .net import NetworkSpec
from .quantizer import ModelMeta, QuantGroup, QuantLayer, QuantModel

MAGIC = b"ALQQ"
VERSION = 1
COORD_BITS = 32
BASELINE_BITS = 32


def pack_signs(column: np.ndarray) -> bytes:
    """Pack a +-1 sign vector into LSB-first bytes (+1 -> bit 1)."""
    bits = (np.asarray(column) > 0).astype(np.uint8)
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_signs(data: bytes, n: int) -> np.ndarray:
    """Inverse of pack_signs; returns int8 signs of length n."""
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[:n]
    return (bits.astype(np.int8) * 2) - 1


def serialize_bytes(model: QuantModel) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    parts.append(_net.pack_spec(model.spec))
    digest = bytes.fromhex(model.meta.config_digest)
    if len(digest) != 32:
        raise ContainerFormatError("config digest must be 32 bytes of hex")
    parts.append(struct.pack("<Q", model.meta.seed))
    parts.append(digest)
    parts.append(struct.pack("<H", model.group_size))
    for ql in model.layers:
        parts.append(struct.pack("<I", len(ql.groups)))
        for g in ql.groups:
            parts.append(struct.pack("<HB", g.size, g.bitwidth))
            parts.append(g.coords.astype("<f4").tobytes())
            for ci in range(g.bitwidth):
                parts.append(pack_signs(g.bases[:, ci]))
    return b"".join(parts)


def serialize(model: QuantModel, path) -> None:
    Path(path).write_bytes(serialize_bytes(model))


def _validate_group(reader, li, gi, g: QuantGroup) -> None:
    where = f"layer {li} group {gi}"
    if not np.all(np.isfinite(g.coords)):
        raise ContainerFormatError(f"{where}: non-finite coordinate", reader.offset)
    if g.bitwidth:
        if np.any(g.coords <= 0):
            raise ContainerFormatError(f"{where}: non-positive coordinate", reader.offset)
        if np.any(np.diff(g.coords) > 0):
            raise ContainerFormatError(f"{where}: coordinates not descending", reader.offset)
        cols = {g.bases[:, ci].tobytes() for ci in range(g.bitwidth)}
        if len(cols) != g.bitwidth:
            raise ContainerFormatError(f"{where}: duplicate base columns", reader.offset)


def deserialize_bytes(data: bytes) -> QuantModel:
    reader = _net.ByteReader(data)
    magic = reader.take_bytes(4, "magic")
    if magic != MAGIC:
        raise ContainerFormatError("bad magic", 0)
    version = reader.take("<H", "version")
    if version != VERSION:
        raise ContainerFormatError(f"unsupported version {version}", 4)
    spec = _net.unpack_spec(reader)
    seed = reader.take("<Q", "meta seed")
    digest = reader.take_bytes(32, "meta digest").hex()
    group_size = reader.take("<H", "group size")
    if group_size < 1:
        raise ContainerFormatError("group size must be >= 1", reader.offset)

    counts = dict(zip(
        (i for i, _ in _net.parameterized_layers(spec)),
        (c for _, c in _net.param_counts(spec)[0]),
    ))
    layers = []
    for layer_index, name in _net.parameterized_layers(spec):
        reader.at_context(name)
        n_groups = reader.take("<I", "group count")
        groups = []
        covered = 0
        for gi in range(n_groups):
            size, bitwidth = reader.take("<HB", f"group {gi} header")
            if size < 1 or size > group_size:
                raise ContainerFormatError(
                    f"layer {layer_index} group {gi}: size {size} out of range",
                    reader.offset,
                )
            raw = reader.take_bytes(bitwidth * 4, f"group {gi} coordinate block")
            coords = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            col_bytes = (size + 7) // 8
            cols = []
            for ci in range(bitwidth):
                raw = reader.take_bytes(col_bytes, f"group {gi} base column {ci}")
                cols.append(unpack_signs(raw, size))
            bases = (
                np.stack(cols, axis=1) if cols else np.zeros((size, 0), dtype=np.int8)
            )
            g = QuantGroup(bases, coords)
            _validate_group(reader, layer_index, gi, g)
            groups.append(g)
            covered += size
        if covered != counts[layer_index]:
            raise ContainerFormatError(
                f"layer {layer_index}: groups cover {covered} values, "
                f"spec expects {counts[layer_index]}",
                reader.offset,
            )
        layers.append(QuantLayer(groups, group_size, covered, layer_index))
    if reader.offset != len(data):
        raise ContainerFormatError("trailing bytes", reader.offset)
    return QuantModel(spec, layers, group_size, ModelMeta(seed, digest))


def deserialize(path) -> QuantModel:
    return deserialize_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# memory accounting


@dataclass
class LayerMemory:
    name: str
    avg_bitwidth: float
    params: int
    base_bits: int


@dataclass
class MemoryReport:
    rows: list[LayerMemory]
    total_params: int
    total_base_bits: int
    total_avg_bitwidth: float
    total_kb: float
    compression_rate: float
    coord_overhead_bits: int | None = None
    container_bits: int | None = None

    def to_json_dict(self) -> dict:
        rate = self.compression_rate
        return {
            "layers": [
                {
                    "name": r.name,
                    "avg_bitwidth": r.avg_bitwidth,
                    "params": r.params,
                    "base_bits": r.base_bits,
                }
                for r in self.rows
            ],
            "total_params": self.total_params,
            "total_base_bits": self.total_base_bits,
            "total_avg_bitwidth": self.total_avg_bitwidth,
            "total_kb": self.total_kb,
            "compression_rate": None if not np.isfinite(rate) else rate,
            "coord_overhead_bits": self.coord_overhead_bits,
            "container_bits": self.container_bits,
        }

    def format_table(self) -> str:
        lines = [f"{'Layer':<10} {'Average Bitwidth':>16} {'Params':>8} {'Memory':>12}"]
        for r in self.rows:
            lines.append(
                f"{r.name:<10} {r.avg_bitwidth:>16.4f} {r.params:>8,} {r.base_bits:>8,} Bit"
            )
        lines.append(
            f"{'Total':<10} {self.total_avg_bitwidth:>16.4f} {self.total_params:>8,} "
            f"{self.total_base_bits:>8,} Bit = {self.total_kb:.3f} KB"
        )
        rate = self.compression_rate
        lines.append(f"Compression vs {BASELINE_BITS}-bit baseline: "
                     + (f"{rate:.2f}x" if np.isfinite(rate) else "n/a (0 base bits)"))
        if self.coord_overhead_bits is not None:
            lines.append(f"Coordinate overhead: {self.coord_overhead_bits:,} Bit")
        if self.container_bits is not None:
            lines.append(f"Container total: {self.container_bits:,} Bit")
        return "\n".join(lines) + "\n"


def _finish_report(rows, coord_overhead=None, container_bits=None) -> MemoryReport:
    total_params = sum(r.params for r in rows)
    total_bits = sum(r.base_bits for r in rows)
    rate = (total_params * BASELINE_BITS / total_bits) if total_bits else float("inf")
    return MemoryReport(
        rows=rows,
        total_params=total_params,
        total_base_bits=total_bits,
        total_avg_bitwidth=total_bits / total_params,
        total_kb=round(total_bits / 8 / 1024, 3),
        compression_rate=rate,
        coord_overhead_bits=coord_overhead,
        container_bits=container_bits,
    )


def memory_report(model: QuantModel) -> MemoryReport:
    """Per-layer and total sign-bit accounting for a quantized model."""
    names = dict(_net.parameterized_layers(model.spec))
    rows = []
    coord_overhead = 0
    for ql in model.layers:
        bits = sum(g.size * g.bitwidth for g in ql.groups)
        coord_overhead += sum(g.bitwidth for g in ql.groups) * COORD_BITS
        rows.append(
            LayerMemory(names[ql.layer_index], bits / ql.param_count, ql.param_count, bits)
        )
    return _finish_report(rows, coord_overhead, len(serialize_bytes(model)) * 8)


def injected_memory_report(spec: NetworkSpec, bitwidths) -> MemoryReport:
    """Accounting for externally supplied per-layer average bitwidths.

    ``bitwidths`` is a {layer name: avg bitwidth} map or a sequence aligned
    with the parameterized layers; base bits are params x bitwidth rounded to
    the nearest bit.
    """
    counts, _total = _net.param_counts(spec)
    if not isinstance(bitwidths, dict):
        if len(bitwidths) != len(counts):
            raise ValueError(f"expected {len(counts)} bitwidths, got {len(bitwidths)}")
        bitwidths = {name: bw for (name, _), bw in zip(counts, bitwidths)}
    rows = []
    for name, params in counts:
        if name not in bitwidths:
            raise ValueError(f"missing bitwidth for layer {name}")
        bw = float(bitwidths[name])
        rows.append(LayerMemory(name, bw, params, int(np.floor(params * bw + 0.5))))
    return _finish_report(rows)

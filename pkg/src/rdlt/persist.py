"""Checkpoint and metrics persistence.

Checkpoints use a little-endian binary layout::

    magic "RDLT" | u32 version | u64 json_len | config+seed JSON
    | u32 n_layers | per layer: u64 record_len | record payload

Record payloads carry the layer kind, activation, dimensions, and the
raw 64-bit factor entries, so a load/save round trip is bit-exact.
Metrics files are append-safe CSV with the header written exactly once
and floats at 17 significant digits (double round trip).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .diagnostics import format_value
from .engine import EngineConfig
from .layers import ACTIVATIONS, FactorizedLinear, LowRankConv2D, Network

CHECKPOINT_MAGIC = b"RDLT"
CHECKPOINT_VERSION = 1

_KIND_LINEAR = 0
_KIND_CONV = 1


class CheckpointError(ValueError):
    """A checkpoint file failed validation."""


def _pack_array(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _pack_linear(layer: FactorizedLinear) -> bytes:
    head = struct.pack(
        "<BBIII", _KIND_LINEAR, ACTIVATIONS.index(layer.activation), layer.n_out, layer.n_in, layer.rank
    )
    return head + _pack_array(layer.u) + _pack_array(layer.s) + _pack_array(layer.v) + _pack_array(layer.bias)


def _pack_conv(layer: LowRankConv2D) -> bytes:
    r_o, r_i, s_w, s_h = layer.core.shape
    head = struct.pack(
        "<BBIIIIII",
        _KIND_CONV,
        ACTIVATIONS.index(layer.activation),
        layer.n_out,
        layer.n_in,
        s_w,
        s_h,
        r_o,
        r_i,
    )
    return (
        head
        + _pack_array(layer.u_o)
        + _pack_array(layer.u_i)
        + _pack_array(layer.core)
        + _pack_array(layer.bias)
    )


def save_checkpoint(network: Network, cfg: EngineConfig, path, seed: int | None = None) -> None:
    meta = json.dumps(
        {"engine": asdict(cfg), "seed": cfg.seed if seed is None else seed}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(network.layers)))
        for layer in network.layers:
            record = _pack_linear(layer) if isinstance(layer, FactorizedLinear) else _pack_conv(layer)
            fh.write(struct.pack("<Q", len(record)))
            fh.write(record)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.data):
            raise CheckpointError(f"{self.path}: corrupt record ({what} truncated)")
        chunk = self.data[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, shape, what: str) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(count * 8, what)
        return np.frombuffer(raw, dtype="<f8").astype(float).reshape(shape)


def _unpack_layer(record: bytes, path):
    r = _Reader(record, path)
    kind, act = r.unpack("<BB", "layer header")
    if act >= len(ACTIVATIONS):
        raise CheckpointError(f"{path}: corrupt record (unknown activation code {act})")
    activation = ACTIVATIONS[act]
    if kind == _KIND_LINEAR:
        n_out, n_in, rank = r.unpack("<III", "linear dims")
        layer = FactorizedLinear(
            u=r.array((n_out, rank), "U"),
            s=r.array((rank, rank), "S"),
            v=r.array((n_in, rank), "V"),
            bias=r.array((n_out,), "bias"),
            activation=activation,
        )
    elif kind == _KIND_CONV:
        n_out, n_in, s_w, s_h, r_o, r_i = r.unpack("<IIIIII", "conv dims")
        layer = LowRankConv2D(
            u_o=r.array((n_out, r_o), "U_O"),
            u_i=r.array((n_in, r_i), "U_I"),
            core=r.array((r_o, r_i, s_w, s_h), "core"),
            bias=r.array((n_out,), "bias"),
            activation=activation,
        )
    else:
        raise CheckpointError(f"{path}: corrupt record (unknown layer kind {kind})")
    if r.offset != len(record):
        raise CheckpointError(f"{path}: corrupt record (trailing bytes)")
    return layer


def load_checkpoint(path):
    """Returns ``(network, engine_config, seed)``.  The file is validated
    in full before any layer is constructed, so a truncated checkpoint
    never yields a partial network."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}, expected {CHECKPOINT_VERSION}")
    (meta_len,) = r.unpack("<Q", "metadata length")
    meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    (n_layers,) = r.unpack("<I", "layer count")
    records = []
    for _ in range(n_layers):
        (record_len,) = r.unpack("<Q", "record length")
        records.append(r.take(record_len, "layer record"))
    if r.offset != len(data):
        raise CheckpointError(f"{path}: corrupt record (trailing bytes after last layer)")
    layers = [_unpack_layer(record, path) for record in records]
    cfg = EngineConfig(**meta["engine"]).validate()
    return Network(layers), cfg, meta["seed"]


def write_metrics(rows, path) -> None:
    """Append rows (mappings with a shared key set) to a CSV file,
    writing the header only when the file is new or empty; flushed before
    returning so partial epochs survive interruptions."""
    rows = list(rows)
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        if rows and fh.tell() == 0:
            fh.write(",".join(rows[0].keys()) + "\n")
        elif not rows and fh.tell() == 0:
            fh.write("")
        for row in rows:
            fh.write(",".join(format_value(v) for v in row.values()) + "\n")
        fh.flush()


def write_metrics_header(keys, path) -> None:
    """Header-only file for runs that produce no rows (zero epochs)."""
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        if fh.tell() == 0:
            fh.write(",".join(keys) + "\n")
        fh.flush()


def read_metrics(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines:
        return []
    keys = lines[0].split(",")
    return [
        {key: float(cell) for key, cell in zip(keys, line.split(","))} for line in lines[1:]
    ]


def median_summary(row_groups) -> list[dict]:
    """Median across runs, position-wise: ``row_groups`` is one list of
    metric rows per run; all runs must agree on length and keys."""
    if not row_groups:
        return []
    length = len(row_groups[0])
    keys = list(row_groups[0][0].keys()) if length else []
    if any(len(group) != length for group in row_groups):
        raise ValueError("metric files disagree on row count")
    summary = []
    for i in range(length):
        summary.append(
            {key: float(np.median([group[i][key] for group in row_groups])) for key in keys}
        )
    return summary

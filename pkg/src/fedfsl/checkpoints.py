"""Binary model checkpoints and the snapshot store used by training runs.

Checkpoint layout (all integers and floats little-endian):

    magic            4 bytes  b"FFSL"
    version          uint32   currently 1
    round_index      int32    -1 for pre-training snapshots
    algorithm        uint16 length + utf-8 bytes
    input_dim        uint32
    feature_dim      uint32
    n_way            uint32
    n_hidden         uint32, then n_hidden * uint32 hidden layer widths
    dual_classifier  uint8
    param_count      uint64
    values           param_count * float64
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .diffcore import ModelSpec, ParamVector

MAGIC = b"FFSL"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(
    path: str | Path,
    spec: ModelSpec,
    round_index: int,
    algorithm: str,
    w: ParamVector,
) -> None:
    alg = algorithm.encode("utf-8")
    header = MAGIC
    header += struct.pack("<I", VERSION)
    header += struct.pack("<i", int(round_index))
    header += struct.pack("<H", len(alg)) + alg
    header += struct.pack(
        "<IIII", spec.input_dim, spec.feature_dim, spec.n_way, len(spec.hidden_layers)
    )
    header += struct.pack(f"<{len(spec.hidden_layers)}I", *spec.hidden_layers)
    header += struct.pack("<B", 1 if spec.dual_classifier else 0)
    header += struct.pack("<Q", len(w))
    body = np.asarray(w.values, dtype="<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_checkpoint(path: str | Path) -> tuple[ModelSpec, int, str, ParamVector]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (round_index,) = struct.unpack_from("<i", raw, pos)
    pos += 4
    (alg_len,) = struct.unpack_from("<H", raw, pos)
    pos += 2
    algorithm = raw[pos : pos + alg_len].decode("utf-8")
    pos += alg_len
    input_dim, feature_dim, n_way, n_hidden = struct.unpack_from("<IIII", raw, pos)
    pos += 16
    hidden = struct.unpack_from(f"<{n_hidden}I", raw, pos)
    pos += 4 * n_hidden
    (dual,) = struct.unpack_from("<B", raw, pos)
    pos += 1
    (count,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    spec = ModelSpec(input_dim, feature_dim, n_way, tuple(hidden), bool(dual))
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
    if values.size != count or len(raw) != pos + 8 * count:
        raise CheckpointError(f"{path}: truncated parameter payload")
    return spec, round_index, algorithm, ParamVector.for_spec(spec, values.copy())


class SnapshotStore:
    """Named model snapshots, in memory and optionally mirrored to disk."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._memory: dict[str, tuple[ModelSpec, int, str, ParamVector]] = {}

    def put(
        self,
        snapshot_id: str,
        spec: ModelSpec,
        round_index: int,
        algorithm: str,
        w: ParamVector,
    ) -> str:
        self._memory[snapshot_id] = (spec, round_index, algorithm, w)
        if self.directory is not None:
            save_checkpoint(
                self.directory / f"{snapshot_id}.ckpt", spec, round_index, algorithm, w
            )
        return snapshot_id

    def get(self, snapshot_id: str) -> ParamVector:
        return self.entry(snapshot_id)[3]

    def entry(self, snapshot_id: str) -> tuple[ModelSpec, int, str, ParamVector]:
        if snapshot_id in self._memory:
            return self._memory[snapshot_id]
        if self.directory is not None:
            path = self.directory / f"{snapshot_id}.ckpt"
            if path.exists():
                entry = load_checkpoint(path)
                self._memory[snapshot_id] = entry
                return entry
        raise KeyError(f"no snapshot {snapshot_id!r}")

    def ids(self) -> list[str]:
        known = set(self._memory)
        if self.directory is not None:
            known.update(p.stem for p in self.directory.glob("*.ckpt"))
        return sorted(known)

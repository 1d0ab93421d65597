"""Single-file checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"FDETCKPT"
    version    uint32
    hdr_len    uint32
    header     hdr_len bytes of UTF-8 JSON (sorted keys, compact)
    tensors    float32 little-endian blocks, in header order
    crc32      uint32 over everything before it

The header carries the run config, the model config (with anchors), the
iteration counter, the loss log and a table of ``{name, kind, dims,
offset}`` entries for the tensor blocks, where ``kind`` is ``param`` or
``velocity`` (the optimiser's momentum buffers).  Writing is
canonical, so save -> load -> save reproduces the same bytes.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_dict
from .detection.model import DetectorModel, ModelConfig
from .errors import CheckpointError, FusionDetectError
from .nn import SGDM
from .train import TrainState

MAGIC = b"FDETCKPT"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: RunConfig
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    iteration: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)

    @classmethod
    def from_training(cls, config: RunConfig, model: DetectorModel, state: TrainState) -> "Checkpoint":
        return cls(config, model.cfg, model.params, state.iteration, state.optimizer.velocity,
                   state.history)

    def model(self) -> DetectorModel:
        return DetectorModel(self.model_config, {k: v.copy() for k, v in self.params.items()})

    def train_state(self) -> TrainState:
        t = self.config.train
        opt = SGDM(t.learning_rate, t.momentum, {k: v.copy() for k, v in self.velocity.items()})
        return TrainState(self.iteration, opt, [dict(h) for h in self.history])


def _tensor_table(groups):
    table, blobs, offset = [], [], 0
    for kind, tensors in groups:
        for name in sorted(tensors):
            data = np.ascontiguousarray(tensors[name], dtype=_LE_F32).tobytes()
            table.append({"name": name, "kind": kind, "dims": list(np.shape(tensors[name])),
                          "offset": offset})
            blobs.append(data)
            offset += len(data)
    return table, b"".join(blobs)


def dumps(ckpt: Checkpoint) -> bytes:
    table, blob = _tensor_table((("param", ckpt.params), ("velocity", ckpt.velocity)))
    header = {
        "config": ckpt.config.model_dump(mode="json"),
        "model": ckpt.model_config.to_dict(),
        "iteration": int(ckpt.iteration),
        "history": ckpt.history,
        "tensors": table,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hdr)) + hdr + blob
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic; cannot read format version)")
    version, hdr_len = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint format version {version} "
                              f"(this build reads version {FORMAT_VERSION})")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{source}: checksum mismatch, file is truncated or corrupt "
                              f"(format version {version})")
    try:
        header = json.loads(data[16:16 + hdr_len].decode("utf-8"))
        config = config_from_dict(header["config"])
        model_cfg = ModelConfig.from_dict(header["model"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{source}: unreadable header (format version {version}): {exc}") from None
    blob = memoryview(data)[16 + hdr_len:-4]
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "velocity": {}}
    for entry in header["tensors"]:
        n = int(np.prod(entry["dims"], dtype=np.int64))
        start = entry["offset"]
        if start + 4 * n > len(blob):
            raise CheckpointError(f"{source}: tensor {entry['name']} runs past the end of the file")
        arr = np.frombuffer(blob[start:start + 4 * n], dtype=_LE_F32).astype(np.float32)
        target = groups[entry["kind"]]
        if entry["name"] in target:
            raise CheckpointError(f"{source}: tensor {entry['name']} stored twice")
        target[entry["name"]] = arr.reshape(entry["dims"])
    ckpt = Checkpoint(config, model_cfg, groups["param"], int(header["iteration"]),
                      groups["velocity"], header["history"])
    # every architecture parameter must be present exactly once
    try:
        ckpt.model()
    except FusionDetectError as exc:
        raise CheckpointError(f"{source}: {exc}") from None
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return loads(data, str(path))

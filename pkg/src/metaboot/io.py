"""Checkpoints and metrics.

Checkpoint format (little-endian): magic "BMSL", u32 version=1, u32 tensor
count; per tensor: u16 name length, name bytes (UTF-8), u8 rank, u64 per
dimension, float64 data; then the run configuration serialized as
length-prefixed (u32) UTF-8 key=value text. The meta-step counter rides in
that text as a ``meta_step`` line. Saving and loading roundtrips bitwise.

Metrics are CSV with header
``meta_step,outer_loss,kl_value,mean_inner_loss,eval_accuracy,wallclock_seconds``,
one row per meta step, flushed per row so interrupted runs leave usable
files. Floats are written with repr (shortest roundtrip), so fixed seeds
give byte-identical files; wallclock cells stay empty unless timing was
requested, keeping the default output reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config_text, serialize_config
from .errors import ValidationError
from .model import ParamSet
from .tensor import Tensor

_MAGIC = b"BMSL"
_VERSION = 1

METRICS_HEADER = ("meta_step", "outer_loss", "kl_value", "mean_inner_loss",
                  "eval_accuracy", "wallclock_seconds")


@dataclass(frozen=True)
class Checkpoint:
    version: int
    params: ParamSet
    config: RunConfig
    meta_step: int


def save_checkpoint(path, params: ParamSet, config: RunConfig,
                    meta_step: int) -> None:
    blob = serialize_config(config) + f"meta_step={int(meta_step)}\n"
    payload = blob.encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(params)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", len(tensor.shape)))
            for dim in tensor.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(tensor.data.astype("<f8").tobytes())
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<B", raw, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}Q", raw, offset)
        offset += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(raw, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        tensors[name] = Tensor(data.reshape(dims))
    (config_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    text = raw[offset:offset + config_len].decode("utf-8")
    offset += config_len
    if offset != len(raw):
        raise ValidationError(f"{path}: trailing bytes in checkpoint")
    meta_step = 0
    config_lines = []
    for line in text.splitlines():
        if line.startswith("meta_step="):
            meta_step = int(line.split("=", 1)[1])
        else:
            config_lines.append(line)
    config = parse_config_text("\n".join(config_lines))
    return Checkpoint(version, ParamSet(tensors), config, meta_step)


class MetricsWriter:
    """Streaming metrics CSV; one flushed row per meta step."""

    def __init__(self, path):
        self._fh = open(Path(path), "w", encoding="utf-8", newline="\n")
        self._fh.write(",".join(METRICS_HEADER) + "\n")
        self._fh.flush()
        self._last_step = -1

    @staticmethod
    def _cell(value) -> str:
        if value is None:
            return ""
        if isinstance(value, float):
            return repr(value)
        return str(value)

    def write(self, meta_step: int, outer_loss: float, kl_value,
              mean_inner_loss: float, eval_accuracy=None,
              wallclock_seconds=None) -> None:
        if meta_step <= self._last_step:
            raise ValidationError("meta_step must increase monotonically")
        self._last_step = meta_step
        row = (meta_step, outer_loss, kl_value, mean_inner_loss,
               eval_accuracy, wallclock_seconds)
        self._fh.write(",".join(self._cell(v) for v in row) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

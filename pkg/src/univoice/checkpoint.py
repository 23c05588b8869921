"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"UVCK" | version u32 | header_len u64 | JSON header | float32 payload

The JSON header carries the model and training configs, the epoch, the best
validation loss, an RNG digest and a parameter table giving each array's name,
shape and byte offset into the payload.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, FormatError, TrailingDataError, TruncatedError, VersionError
from .model import ModelConfig, validate_params

MAGIC = b"UVCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    train_config: dict = field(default_factory=dict)
    epoch: int = 0
    best_val_loss: float = float("nan")
    rng_digest: str = ""

    def __post_init__(self):
        self.params = {k: np.ascontiguousarray(v, dtype="<f4") for k, v in self.params.items()}
        validate_params(self.params, self.model_config)

    def float_params(self) -> dict[str, np.ndarray]:
        """Parameters widened to float64 for evaluation."""
        return {k: v.astype(np.float64) for k, v in self.params.items()}

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.model_config == other.model_config
            and self.train_config == other.train_config
            and self.epoch == other.epoch
            and _same_float(self.best_val_loss, other.best_val_loss)
            and self.rng_digest == other.rng_digest
            and self.params.keys() == other.params.keys()
            and all(self.params[k].tobytes() == other.params[k].tobytes() for k in self.params)
        )


def _same_float(a, b):
    return (np.isnan(a) and np.isnan(b)) or a == b


def to_bytes(ckpt: Checkpoint) -> bytes:
    table = []
    offset = 0
    for name in sorted(ckpt.params):
        arr = ckpt.params[name]
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "epoch": ckpt.epoch,
        "best_val_loss": None if np.isnan(ckpt.best_val_loss) else ckpt.best_val_loss,
        "rng_digest": ckpt.rng_digest,
        "params": table,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(ckpt.params[entry["name"]].tobytes() for entry in table)
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + payload


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < _PREFIX.size:
        raise TruncatedError("truncated checkpoint prefix")
    _, version, head_len = _PREFIX.unpack_from(blob)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(blob) < start + head_len:
        raise TruncatedError("truncated checkpoint header")
    try:
        header = json.loads(blob[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed checkpoint header: {exc}") from exc
    payload = memoryview(blob)[start + head_len:]
    try:
        need = int(header["payload_bytes"])
        table = [(e["name"], [int(d) for d in e["shape"]], int(e["offset"])) for e in header["params"]]
        model_config = ModelConfig(**header["model_config"])
        best = header["best_val_loss"]
        meta = dict(train_config=header["train_config"], epoch=header["epoch"], rng_digest=header["rng_digest"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint header: {exc!r}") from exc
    if len(payload) < need:
        raise TruncatedError(f"truncated payload: {len(payload)} of {need} bytes")
    if len(payload) > need:
        raise TrailingDataError(f"{len(payload) - need} trailing bytes after payload")
    params = {}
    for name, shape, offset in table:
        count = int(np.prod(shape, dtype=np.int64))
        if offset < 0 or offset + 4 * count > need:
            raise FormatError(f"parameter {name} lies outside the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        params[name] = arr.reshape(shape).copy()
    return Checkpoint(
        model_config=model_config,
        params=params,
        best_val_loss=float("nan") if best is None else best,
        **meta,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())

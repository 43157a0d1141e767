"""Deterministic checkpoint serialization.

Layout: 4-byte magic, u32 version, u64 header length, UTF-8 JSON header
(sorted keys, array index with offsets), raw little-endian array payloads,
and a trailing SHA-256 over everything before it. Saving the same state twice
produces identical bytes, and any corruption trips the checksum.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"PAVC"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class ChecksumError(ValueError):
    """Stored SHA-256 does not match the file contents."""


class DigestMismatchError(ValueError):
    """Checkpoint was produced under a different configuration."""


def config_digest(config: dict) -> str:
    """Stable SHA-256 digest of a configuration mapping."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    """All parameter arrays keyed by stable names plus run metadata."""

    params: dict[str, np.ndarray]
    config: dict
    phase: str = ""
    step: int = 0
    seed: int = 0
    metrics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return config_digest(self.config)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    names = sorted(ckpt.params)
    index = []
    offset = 0
    payloads = []
    for name in names:
        arr = np.asarray(ckpt.params[name])
        # tobytes() serializes in C order; note ascontiguousarray would
        # silently promote 0-d arrays to 1-d and corrupt scalar shapes
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append(
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "offset": offset}
        )
        payloads.append(data)
        offset += len(data)
    header = {
        "config": ckpt.config,
        "config_digest": ckpt.digest,
        "phase": ckpt.phase,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "metrics": ckpt.metrics,
        "extra": ckpt.extra,
        "arrays": index,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes))
    body += header_bytes + b"".join(payloads)
    with open(path, "wb") as f:
        f.write(body)
        f.write(hashlib.sha256(body).digest())


def load_checkpoint(
    path: str | Path, expected_config: dict | None = None, allow_mismatch: bool = False
) -> Checkpoint:
    """Read and verify a checkpoint.

    When ``expected_config`` is given, its digest must match the stored one
    unless ``allow_mismatch`` overrides the guard.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size + 32:
        raise ChecksumError("file too short to be a checkpoint")
    body, stored_hash = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != stored_hash:
        raise ChecksumError("checkpoint checksum mismatch (truncated or corrupted file)")
    magic, version, header_len = _PREFIX.unpack_from(body)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header_end = _PREFIX.size + header_len
    header = json.loads(body[_PREFIX.size : header_end].decode("utf-8"))
    if expected_config is not None and config_digest(expected_config) != header["config_digest"]:
        if not allow_mismatch:
            raise DigestMismatchError(
                "checkpoint was written under a different config "
                f"(stored {header['config_digest'][:12]}..., "
                f"expected {config_digest(expected_config)[:12]}...)"
            )
    params = {}
    payload = body[header_end:]
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
        params[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(
        params=params,
        config=header["config"],
        phase=header["phase"],
        step=header["step"],
        seed=header["seed"],
        metrics=header["metrics"],
        extra=header["extra"],
    )

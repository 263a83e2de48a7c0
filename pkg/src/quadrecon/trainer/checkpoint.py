"""
Versioned checkpoint container.

Layout (all integers little-endian)::

    b"QRCK" | uint32 version | uint64 header length | header (JSON, sorted keys)
    | payload (float64 arrays, little-endian, in header order) | sha256(header + payload)

The header maps each named section to its JSON metadata and to the
``[name, shape, offset, count]`` records of its arrays. Arrays are stored in
sorted name order, so saving a loaded checkpoint reproduces the same bytes.
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Tuple

import numpy as np

from quadrecon.errors import CheckpointError, CheckpointSectionError, CheckpointTruncatedError, CheckpointVersionError

logger = logging.getLogger(__name__)

MAGIC = b"QRCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DIGEST_SIZE = 32
_LE_FLOAT = np.dtype("<f8")


@dataclass
class Section:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)


class Checkpoint:
    def __init__(self, sections: Mapping[str, Section] = None):
        self.sections: Dict[str, Section] = dict(sections or {})

    def add(self, name: str, tensors: Mapping[str, np.ndarray] = None, meta: Mapping[str, Any] = None) -> Section:
        section = Section(
            tensors={k: np.asarray(v, dtype=np.float64) for k, v in (tensors or {}).items()},
            meta=dict(meta or {}),
        )
        self.sections[name] = section
        return section

    def section(self, name: str) -> Section:
        if name not in self.sections:
            raise CheckpointSectionError(f"checkpoint has no section {name!r}", {"available": sorted(self.sections)})
        return self.sections[name]

    def to_bytes(self) -> bytes:
        header: Dict[str, Any] = {"sections": {}}
        chunks = []
        offset = 0
        for name in sorted(self.sections):
            section = self.sections[name]
            records = []
            for key in sorted(section.tensors):
                array = np.ascontiguousarray(section.tensors[key], dtype=_LE_FLOAT)
                records.append([key, list(array.shape), offset, int(array.size)])
                chunks.append(array.tobytes())
                offset += array.size
            header["sections"][name] = {"meta": section.meta, "tensors": records}
        header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        payload = b"".join(chunks)
        digest = hashlib.sha256(header_bytes + payload).digest()
        return _PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + payload + digest

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _PREFIX.size:
            raise CheckpointTruncatedError("checkpoint shorter than its fixed prefix", {"size": len(data)})
        magic, version, header_len = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointError("not a checkpoint file", {"magic": magic.hex()})
        if version != VERSION:
            raise CheckpointVersionError(f"checkpoint version {version} is not supported", {"version": version, "expected": VERSION})
        start = _PREFIX.size
        if len(data) < start + header_len + _DIGEST_SIZE:
            raise CheckpointTruncatedError("checkpoint header is truncated", {"size": len(data)})
        header_bytes = data[start:start + header_len]
        try:
            header = json.loads(header_bytes)
        except ValueError as exc:
            raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
        payload = data[start + header_len:-_DIGEST_SIZE]
        expected = sum(record[3] for section in header["sections"].values() for record in section["tensors"])
        if len(payload) != expected * _LE_FLOAT.itemsize:
            raise CheckpointTruncatedError(
                "checkpoint payload is truncated",
                {"expected_bytes": expected * _LE_FLOAT.itemsize, "actual_bytes": len(payload)},
            )
        if hashlib.sha256(header_bytes + payload).digest() != data[-_DIGEST_SIZE:]:
            raise CheckpointError("checkpoint digest mismatch")
        values = np.frombuffer(payload, dtype=_LE_FLOAT)
        checkpoint = cls()
        for name, section in header["sections"].items():
            tensors = {
                key: values[offset:offset + count].astype(np.float64).reshape(shape)
                for key, shape, offset, count in section["tensors"]
            }
            checkpoint.sections[name] = Section(tensors=tensors, meta=section["meta"])
        return checkpoint


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> str:
    """Write atomically; returns the hex digest of the written file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint.to_bytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    digest = hashlib.sha256(data).hexdigest()
    logger.info(f"Checkpoint written to {path} ({len(data)} bytes, sha256 {digest[:12]})")
    return digest


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}", {"path": str(path)})
    return Checkpoint.from_bytes(path.read_bytes())


def parameter_checksum(named: Iterable[Tuple[str, np.ndarray]]) -> str:
    """sha256 over sorted ``(name, float64 bytes)`` pairs."""
    digest = hashlib.sha256()
    for name, value in sorted(named, key=lambda item: item[0]):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(value, dtype=_LE_FLOAT).tobytes())
    return digest.hexdigest()

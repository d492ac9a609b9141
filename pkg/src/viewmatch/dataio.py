"""On-disk formats: tensor files, checkpoints, and the dataset manifest.

Tensor files carry a ``NVST`` magic, a little-endian u16 version, a u8 rank,
u64 dimensions and a row-major float32 payload.  Checkpoints carry a ``NVSM``
magic and embed the extractor weights, the vertex feature bank with its
seen-vertex mask, the pseudo-label records and a JSON echo of the pipeline
configuration that produced them; loading verifies the echo against the
caller's configuration.  All writes go through a temp file plus rename, so a
crash never leaves a half-written artifact behind.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import PipelineConfig
from .features import ExtractorWeights
from .geometry import Pose
from .matching import PseudoLabelSet
from .mesh import VertexFeatureBank

TENSOR_MAGIC = b"NVST"
CHECKPOINT_MAGIC = b"NVSM"
FORMAT_VERSION = 1

_MAX_RANK = 32
_MAX_ELEMENTS = 1 << 40


class FormatError(Exception):
    """A malformed file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigConflictError(Exception):
    """Checkpoint config echo disagrees with the runtime configuration."""

    def __init__(self, fields: Sequence[str]):
        self.fields = list(fields)
        super().__init__(
            "checkpoint configuration conflicts on: " + ", ".join(self.fields))


def _atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def tensor_bytes(array: np.ndarray) -> bytes:
    """Serialize an array to the tensor format (float32 payload)."""
    array = np.asarray(array)
    if not np.all(np.isfinite(array)):
        raise ValueError("refusing to serialize non-finite tensor entries")
    if array.ndim > _MAX_RANK:
        raise ValueError(f"tensor rank {array.ndim} exceeds the format limit {_MAX_RANK}")
    header = TENSOR_MAGIC + struct.pack("<HB", FORMAT_VERSION, array.ndim)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape) if array.ndim else b""
    payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    return header + dims + payload


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    _atomic_write(path, tensor_bytes(array))


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor starting at ``offset``; returns (array, end offset)."""
    start = offset
    if len(buf) < start + 4 or buf[start:start + 4] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic, expected {TENSOR_MAGIC!r}", start)
    offset = start + 4
    if len(buf) < offset + 3:
        raise FormatError("truncated tensor header", len(buf))
    version, ndim = struct.unpack_from("<HB", buf, offset)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor version {version}", offset)
    offset += 3
    if ndim > _MAX_RANK:
        raise FormatError(f"tensor rank {ndim} exceeds the format limit", offset - 1)
    if len(buf) < offset + 8 * ndim:
        raise FormatError("truncated tensor dimension list", len(buf))
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset) if ndim else ()
    offset += 8 * ndim
    count = 1
    for dim in shape:
        count *= dim
        if count > _MAX_ELEMENTS:
            raise FormatError(f"tensor with {shape} entries is implausibly large",
                              offset - 8 * ndim)
    end = offset + 4 * count
    if len(buf) < end:
        raise FormatError(
            f"truncated tensor payload, expected {4 * count} bytes", len(buf))
    flat = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    return flat.reshape(shape).astype(float), end


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as handle:
        buf = handle.read()
    array, end = tensor_from_bytes(buf, 0)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor payload", end)
    return array


@dataclass
class Checkpoint:
    """A trained state: config echo, extractor weights, bank, pseudo-labels."""

    config: PipelineConfig
    weights: ExtractorWeights
    bank: VertexFeatureBank
    pseudo_labels: PseudoLabelSet


def checkpoint_bytes(checkpoint: Checkpoint) -> bytes:
    config_blob = json.dumps(checkpoint.config.to_dict(), sort_keys=True,
                             separators=(",", ":")).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<I", len(config_blob)),
        config_blob,
        tensor_bytes(checkpoint.weights.w),
        tensor_bytes(checkpoint.weights.b),
        tensor_bytes(checkpoint.bank.features),
        tensor_bytes(checkpoint.bank.initialized.astype(np.float32)),
        struct.pack("<I", len(checkpoint.pseudo_labels.entries)),
    ]
    for image_id, (pose, score) in checkpoint.pseudo_labels.entries.items():
        encoded = image_id.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<4d", pose.azimuth, pose.elevation,
                                 pose.inplane, score))
    return b"".join(parts)


def save_checkpoint(path: str | os.PathLike, checkpoint: Checkpoint) -> None:
    _atomic_write(path, checkpoint_bytes(checkpoint))


def load_checkpoint(path: str | os.PathLike,
                    expected_config: PipelineConfig | None = None) -> Checkpoint:
    with open(path, "rb") as handle:
        buf = handle.read()
    if len(buf) < 4 or buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic, expected {CHECKPOINT_MAGIC!r}", 0)
    if len(buf) < 6:
        raise FormatError("truncated checkpoint header", len(buf))
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    offset = 6
    if len(buf) < offset + 4:
        raise FormatError("truncated config block length", len(buf))
    (config_len,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if len(buf) < offset + config_len:
        raise FormatError("truncated config block", len(buf))
    try:
        config = PipelineConfig.from_dict(
            json.loads(buf[offset:offset + config_len].decode("utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable config block: {exc}", offset) from None
    offset += config_len

    w, offset = tensor_from_bytes(buf, offset)
    b, offset = tensor_from_bytes(buf, offset)
    bank_features, offset = tensor_from_bytes(buf, offset)
    seen, offset = tensor_from_bytes(buf, offset)

    if len(buf) < offset + 4:
        raise FormatError("truncated pseudo-label count", len(buf))
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    entries: dict[str, tuple[Pose, float]] = {}
    for _ in range(count):
        if len(buf) < offset + 2:
            raise FormatError("truncated pseudo-label record", len(buf))
        (id_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        if len(buf) < offset + id_len + 32:
            raise FormatError("truncated pseudo-label record", len(buf))
        image_id = buf[offset:offset + id_len].decode("utf-8")
        offset += id_len
        azimuth, elevation, inplane, score = struct.unpack_from("<4d", buf, offset)
        offset += 32
        entries[image_id] = (Pose(azimuth, elevation, inplane), float(score))
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after checkpoint",
                          offset)

    checkpoint = Checkpoint(
        config=config,
        weights=ExtractorWeights(w=w, b=b),
        bank=VertexFeatureBank(features=bank_features, initialized=seen > 0.5),
        pseudo_labels=PseudoLabelSet(entries=entries),
    )
    if expected_config is not None:
        mismatched = [key for key, value in expected_config.to_dict().items()
                      if config.to_dict()[key] != value]
        if mismatched:
            raise ConfigConflictError(mismatched)
    return checkpoint


@dataclass(frozen=True)
class ManifestEntry:
    """One dataset record; ``pose`` is None when ground truth is withheld."""

    image_id: str
    path: str
    split: str
    occlusion_fraction: float
    pose: Pose | None


_SPLITS = ("labelled", "unlabelled", "test")


def manifest_lines(entries: Sequence[ManifestEntry]) -> str:
    lines = []
    for entry in entries:
        if entry.split not in _SPLITS:
            raise ValueError(f"unknown split {entry.split!r} for {entry.image_id}")
        if entry.split == "labelled" and entry.pose is None:
            raise ValueError(f"labelled entry {entry.image_id} is missing its pose")
        head = (f"{entry.image_id},{entry.path},{entry.split},"
                f"{entry.occlusion_fraction:.6f}")
        if entry.pose is None:
            lines.append(head + ",none")
        else:
            degs = (math.degrees(entry.pose.azimuth),
                    math.degrees(entry.pose.elevation),
                    math.degrees(entry.pose.inplane))
            lines.append(head + "," + ",".join(f"{d:.6f}" for d in degs))
    return "".join(line + "\n" for line in lines)


def write_manifest(path: str | os.PathLike, entries: Sequence[ManifestEntry]) -> None:
    _atomic_write(path, manifest_lines(entries).encode("utf-8"))


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    entries: list[ManifestEntry] = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(",")
            if len(fields) not in (5, 7):
                raise ValueError(
                    f"{path}:{lineno}: expected 5 or 7 comma-separated fields, "
                    f"got {len(fields)}")
            image_id, rel_path, split, occlusion = fields[:4]
            if split not in _SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
            try:
                occlusion_value = float(occlusion)
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: bad occlusion fraction {occlusion!r}") from None
            if len(fields) == 5:
                if fields[4] != "none":
                    raise ValueError(
                        f"{path}:{lineno}: expected pose angles or 'none', "
                        f"got {fields[4]!r}")
                pose = None
            else:
                try:
                    azimuth, elevation, inplane = (float(v) for v in fields[4:])
                except ValueError:
                    raise ValueError(
                        f"{path}:{lineno}: bad pose angles {fields[4:]}") from None
                pose = Pose.wrapped(math.radians(azimuth), math.radians(elevation),
                                    math.radians(inplane))
            if split == "labelled" and pose is None:
                raise ValueError(f"{path}:{lineno}: labelled entry without a pose")
            entries.append(ManifestEntry(image_id=image_id, path=rel_path, split=split,
                                         occlusion_fraction=occlusion_value, pose=pose))
    return entries

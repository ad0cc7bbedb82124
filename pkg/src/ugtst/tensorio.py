"""On-disk tensor container and dataset manifests.

Container layout (all integers little-endian)::

    b"UGTS" | version:u8 | dtype:u8 | ndim:u8 | extents:u32*ndim | payload

dtype code 0 is float32, 1 is uint8. The payload is row-major.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"UGTS"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class TensorFormatError(ValueError):
    """Base class for malformed tensor files or tensors."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class NonFiniteError(TensorFormatError):
    pass


class TensorIOError(OSError):
    pass


class ManifestError(ValueError):
    """Raised when a manifest fails validation; ``slice_ids`` lists offenders."""

    def __init__(self, message: str, slice_ids: Sequence[str] = ()):
        super().__init__(message)
        self.slice_ids = list(slice_ids)


def _check_tensor(arr: np.ndarray) -> None:
    if arr.dtype not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; expected float32 or uint8")
    if arr.ndim < 1 or arr.ndim > 255:
        raise TensorFormatError(f"unsupported rank {arr.ndim}")
    if any(d <= 0 for d in arr.shape):
        raise TensorFormatError(f"zero extent in dims {arr.shape}")
    if arr.dtype == np.float32 and not np.all(np.isfinite(arr)):
        raise NonFiniteError("float32 tensor contains NaN or infinity")


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    _check_tensor(arr)
    header = MAGIC + bytes([VERSION, _DTYPE_CODES[arr.dtype], arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODE_DTYPES[_DTYPE_CODES[arr.dtype]]).tobytes()
    return header + payload


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {buf[:4]!r}")
    version, code, ndim = buf[4], buf[5], buf[6]
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"{source}: unknown dtype code {code}")
    if ndim == 0:
        raise TensorFormatError(f"{source}: rank 0 tensor")
    end = 7 + 4 * ndim
    if len(buf) < end:
        raise TruncatedPayloadError(f"{source}: truncated header")
    dims = struct.unpack(f"<{ndim}I", buf[7:end])
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"{source}: zero extent in dims {dims}")
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    payload = buf[end:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{source}: payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise TensorFormatError(f"{source}: {len(payload) - expected} trailing bytes")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if code == 0 and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{source}: payload contains NaN or infinity")
    return arr


def write_tensor(path, arr: np.ndarray) -> None:
    data = encode_tensor(arr)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise TensorIOError(f"cannot write tensor to {path}: {exc}") from exc


def read_tensor(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise TensorIOError(f"cannot read tensor from {path}: {exc}") from exc
    return decode_tensor(buf, str(path))


def read_dims(path) -> tuple:
    """Read only the extents from a tensor file header."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(7)
            if len(head) < 7 or head[:4] != MAGIC:
                raise BadMagicError(f"{path}: bad magic {head[:4]!r}")
            ndim = head[6]
            raw = fh.read(4 * ndim)
    except OSError as exc:
        raise TensorIOError(f"cannot read tensor from {path}: {exc}") from exc
    if len(raw) < 4 * ndim:
        raise TruncatedPayloadError(f"{path}: truncated header")
    return struct.unpack(f"<{ndim}I", raw)


@dataclass(frozen=True)
class TargetSlice:
    id: str
    case_id: str
    index_in_case: int
    image: Path
    label: Optional[Path] = None

    @property
    def has_label(self) -> bool:
        return self.label is not None

    def load_image(self) -> np.ndarray:
        img = read_tensor(self.image)
        if img.ndim != 2 or img.dtype != np.float32:
            raise TensorFormatError(f"slice {self.id}: image must be a 2D float32 tensor")
        if img.min() < 0.0 or img.max() > 1.0:
            raise TensorFormatError(f"slice {self.id}: image values outside [0, 1]")
        return img


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    domain_tag: str
    num_classes: int
    slices: tuple = field(default_factory=tuple)
    root: Optional[Path] = None

    @property
    def ids(self) -> list:
        return [s.id for s in self.slices]

    def __len__(self) -> int:
        return len(self.slices)

    def get(self, slice_id: str) -> TargetSlice:
        for s in self.slices:
            if s.id == slice_id:
                return s
        raise KeyError(slice_id)

    def load_label(self, slice_id: str) -> np.ndarray:
        """Load and range-check the label of one slice."""
        s = self.get(slice_id)
        if s.label is None:
            raise ManifestError(f"slice {slice_id} has no label", [slice_id])
        lab = read_tensor(s.label)
        if lab.dtype != np.uint8 or lab.ndim != 2:
            raise ManifestError(f"slice {slice_id}: label must be a 2D uint8 tensor", [slice_id])
        if lab.max() >= self.num_classes:
            raise ManifestError(
                f"slice {slice_id}: label value {lab.max()} >= num_classes {self.num_classes}",
                [slice_id])
        return lab

    def cases(self) -> dict:
        out: dict = {}
        for s in self.slices:
            out.setdefault(s.case_id, []).append(s)
        return out


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise TensorIOError(f"cannot read manifest {path}: {exc}") from exc
    for key in ("name", "domain_tag", "num_classes", "slices"):
        if key not in doc:
            raise ManifestError(f"{path}: missing field {key!r}")
    num_classes = int(doc["num_classes"])
    if num_classes < 2:
        raise ManifestError(f"{path}: num_classes must be >= 2, got {num_classes}")

    root = path.parent
    slices = []
    seen: set = set()
    dupes, missing, mismatched = [], [], []
    for entry in doc["slices"]:
        sid = str(entry["id"])
        if sid in seen:
            dupes.append(sid)
        seen.add(sid)
        image = root / entry["image"]
        label = root / entry["label"] if entry.get("label") is not None else None
        if not image.is_file() or (label is not None and not label.is_file()):
            missing.append(sid)
        elif label is not None and read_dims(image) != read_dims(label):
            mismatched.append(sid)
        slices.append(TargetSlice(sid, str(entry["case_id"]), int(entry["index_in_case"]),
                                  image, label))
    if dupes:
        raise ManifestError(f"{path}: duplicate slice ids {dupes}", dupes)
    if missing:
        raise ManifestError(f"{path}: missing files for slices {missing}", missing)
    if mismatched:
        raise ManifestError(f"{path}: label/image dims mismatch for slices {mismatched}",
                            mismatched)
    slices.sort(key=lambda s: (s.case_id, s.index_in_case))
    return DatasetManifest(doc["name"], doc["domain_tag"], num_classes, tuple(slices), root)


def write_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    root = path.parent

    def rel(p):
        if p is None:
            return None
        # paths outside the manifest directory are stored with ".." segments
        return Path(os.path.relpath(Path(p).resolve(), root.resolve())).as_posix()

    doc = {
        "name": manifest.name,
        "domain_tag": manifest.domain_tag,
        "num_classes": manifest.num_classes,
        "slices": [
            {"id": s.id, "case_id": s.case_id, "index_in_case": s.index_in_case,
             "image": rel(s.image), "label": rel(s.label)}
            for s in manifest.slices
        ],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")

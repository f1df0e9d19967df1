"""Named float32 tensor collections with bit-exact single-file persistence.

A ``TensorMap`` holds a full checkpoint or a task vector (a checkpoint delta).
The on-disk layout is the de-facto single-file tensor container used by public
model hubs: an 8-byte little-endian header length, a UTF-8 JSON header mapping
tensor names to dtype/shape/offsets (plus an optional ``__metadata__`` string
map), followed by raw little-endian row-major data. Files written here load in
other ecosystems and vice versa, with the restriction that only rank-1/rank-2
float32 tensors are accepted.

Writing is canonical: names sorted, compact JSON, header padded with spaces to
an 8-byte boundary, tensors laid out contiguously in name order. Saving the
same ``TensorMap`` twice yields identical bytes.
"""

import hashlib
import json
import logging
import os
import struct
import tempfile
from collections.abc import Iterable, Iterator, Mapping
from pathlib import Path

import numpy as np

from .errors import ContainerFormatError

logger = logging.getLogger(__name__)

_HEADER_ALIGN = 8
_F32_BYTES = 4

# meta keys written by diff() and consumed by the merge ops
META_KIND = "kind"
META_BASE_FINGERPRINT = "base_fingerprint"
KIND_DELTA = "delta"


def _validate_entry(name: str, arr: np.ndarray) -> np.ndarray:
    if not isinstance(name, str) or not name:
        raise ValueError(f"tensor names must be non-empty strings, got {name!r}")
    if not isinstance(arr, np.ndarray):
        raise TypeError(f"tensor {name!r}: expected numpy array, got {type(arr).__name__}")
    if arr.dtype != np.float32:
        # mixed precision is rejected rather than silently cast; callers must
        # round explicitly so results stay bit-reproducible
        raise TypeError(f"tensor {name!r}: dtype must be float32, got {arr.dtype}")
    if arr.ndim not in (1, 2):
        raise ValueError(f"tensor {name!r}: rank must be 1 or 2, got rank {arr.ndim}")
    if any(dim < 1 for dim in arr.shape):
        raise ValueError(f"tensor {name!r}: all dimensions must be >= 1, got shape {arr.shape}")
    out = np.array(arr, dtype=np.float32, order="C", copy=True)
    out.setflags(write=False)
    return out


class TensorMap:
    """Ordered map from tensor name to a read-only float32 array.

    Iteration order is always the lexicographic order of names, which anchors
    every reduction in the package to a fixed, scheduler-independent order.
    ``meta`` is a free-form string-to-string map (provenance: base fingerprint,
    merge recipe, ...).
    """

    __slots__ = ("_entries", "meta")

    def __init__(
        self,
        tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = (),
        meta: Mapping[str, str] | None = None,
    ):
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        entries: dict[str, np.ndarray] = {}
        for name, arr in items:
            if name in entries:
                raise ValueError(f"duplicate tensor name {name!r}")
            entries[name] = _validate_entry(name, arr)
        self._entries = dict(sorted(entries.items()))
        self.meta: dict[str, str] = {}
        if meta:
            for k, v in meta.items():
                if not isinstance(k, str) or not isinstance(v, str):
                    raise TypeError("meta must map str to str")
                self.meta[k] = v

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._entries.items())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __eq__(self, other: object) -> bool:
        """Bitwise equality: same names, shapes, data bytes, and meta."""
        if not isinstance(other, TensorMap):
            return NotImplemented
        if self.names() != other.names() or self.meta != other.meta:
            return False
        for name, arr in self.items():
            b = other[name]
            if arr.shape != b.shape or arr.tobytes() != b.tobytes():
                return False
        return True

    def __repr__(self) -> str:
        return f"TensorMap({len(self)} tensors, meta={self.meta!r})"

    def replace_meta(self, meta: Mapping[str, str]) -> "TensorMap":
        """Return a new map sharing this one's arrays but with fresh meta."""
        out = TensorMap()
        out._entries = self._entries
        out.meta = dict(meta)
        return out


def fingerprint(t: TensorMap) -> str:
    """Content hash (hex) of names, shapes, and raw data; meta is excluded so
    re-tagging a checkpoint does not change its identity."""
    h = hashlib.sha256()
    for name, arr in t.items():
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        h.update(struct.pack("<Q", arr.ndim))
        for dim in arr.shape:
            h.update(struct.pack("<Q", dim))
        h.update(arr.tobytes())
    return h.hexdigest()


def write_atomic(path: str | Path, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a temp file + rename so partial
    outputs are never left behind."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def save_checkpoint(t: TensorMap, path: str | Path) -> None:
    """Serialize ``t`` to the container layout. Deterministic: the same map
    always produces identical bytes."""
    header: dict[str, object] = {}
    if t.meta:
        header["__metadata__"] = dict(sorted(t.meta.items()))
    offset = 0
    blobs: list[bytes] = []
    for name, arr in t.items():
        blob = arr.tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(blob)],
        }
        blobs.append(blob)
        offset += len(blob)
    encoded = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    pad = (-(8 + len(encoded))) % _HEADER_ALIGN
    encoded += b" " * pad
    payload = struct.pack("<Q", len(encoded)) + encoded + b"".join(blobs)
    write_atomic(path, payload)


def _parse_header(raw: bytes, path: Path) -> tuple[dict, int]:
    if len(raw) < 8:
        raise ContainerFormatError(f"{path}: file too short for an 8-byte header length")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if header_len == 0 or 8 + header_len > len(raw):
        raise ContainerFormatError(
            f"{path}: header length {header_len} exceeds file size {len(raw)}"
        )

    def reject_dupes(pairs):
        seen = set()
        for key, _ in pairs:
            if key in seen:
                raise ContainerFormatError(f"{path}: duplicate tensor name {key!r} in header")
            seen.add(key)
        return dict(pairs)

    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"), object_pairs_hook=reject_dupes)
    except ContainerFormatError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{path}: malformed header JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ContainerFormatError(f"{path}: header must be a JSON object")
    return header, 8 + header_len


def load_checkpoint(path: str | Path) -> TensorMap:
    """Load a container file into a ``TensorMap``.

    Rejects non-float32 tensors, ranks other than 1/2, duplicate names, and
    offsets that disagree with the declared shapes, naming the offending
    tensor in each error.
    """
    path = Path(path)
    raw = path.read_bytes()
    header, data_start = _parse_header(raw, path)
    data_len = len(raw) - data_start

    meta: dict[str, str] = {}
    tensors: list[tuple[str, np.ndarray]] = []
    for name, entry in header.items():
        if name == "__metadata__":
            if not isinstance(entry, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in entry.items()
            ):
                raise ContainerFormatError(f"{path}: __metadata__ must map strings to strings")
            meta = dict(entry)
            continue
        if not name:
            raise ContainerFormatError(f"{path}: empty tensor name in header")
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise ContainerFormatError(
                f"{path}: tensor {name!r}: header entry must have exactly "
                "dtype/shape/data_offsets"
            )
        if entry["dtype"] != "F32":
            raise ContainerFormatError(
                f"{path}: tensor {name!r}: unsupported element type {entry['dtype']!r} "
                "(only F32 is supported)"
            )
        shape = entry["shape"]
        if (
            not isinstance(shape, list)
            or not shape
            or len(shape) > 2
            or not all(isinstance(d, int) and d >= 1 for d in shape)
        ):
            raise ContainerFormatError(
                f"{path}: tensor {name!r}: shape must be 1 or 2 positive integers, got {shape!r}"
            )
        offsets = entry["data_offsets"]
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) for o in offsets)
        ):
            raise ContainerFormatError(
                f"{path}: tensor {name!r}: data_offsets must be [begin, end]"
            )
        begin, end = offsets
        numel = int(np.prod(shape, dtype=np.int64))
        if begin < 0 or end < begin or end > data_len:
            raise ContainerFormatError(
                f"{path}: tensor {name!r}: data region truncated "
                f"(offsets [{begin}, {end}], data length {data_len})"
            )
        if end - begin != numel * _F32_BYTES:
            raise ContainerFormatError(
                f"{path}: tensor {name!r}: offsets [{begin}, {end}] hold "
                f"{(end - begin) // _F32_BYTES} floats but shape {shape} needs {numel}"
            )
        arr = np.frombuffer(raw, dtype="<f4", count=numel, offset=data_start + begin)
        tensors.append((name, arr.reshape(shape).copy()))
    return TensorMap(tensors, meta=meta)


def _require_compatible(a: TensorMap, b: TensorMap, what: str) -> None:
    if a.names() != b.names():
        missing = sorted(set(a.names()) - set(b.names()))
        extra = sorted(set(b.names()) - set(a.names()))
        raise ValueError(f"{what}: tensor name sets differ (missing={missing}, extra={extra})")
    for name, arr in a.items():
        if arr.shape != b[name].shape:
            raise ValueError(
                f"{what}: tensor {name!r} shape mismatch: {arr.shape} vs {b[name].shape}"
            )


def diff(finetuned: TensorMap, base: TensorMap) -> TensorMap:
    """Task vector: element-wise ``finetuned - base`` (single float32 rounding
    per element). The result is tagged as a delta and records the base's
    fingerprint so later merges can verify the shared-base assumption."""
    _require_compatible(finetuned, base, "diff")
    out = {name: np.subtract(arr, base[name]) for name, arr in finetuned.items()}
    return TensorMap(out, meta={META_KIND: KIND_DELTA, META_BASE_FINGERPRINT: fingerprint(base)})


def apply_delta(base: TensorMap, delta: TensorMap, lam: float) -> TensorMap:
    """``base + lam * delta`` element-wise.

    ``lam == 1.0`` uses a single float32 addition per element so it is the
    exact inverse of :func:`diff` on realistic checkpoints; other scalings
    accumulate in float64 and round once to float32.
    """
    if not np.isfinite(lam):
        raise ValueError(f"lambda must be finite, got {lam}")
    _require_compatible(base, delta, "apply_delta")
    out = {}
    for name, arr in base.items():
        if lam == 1.0:
            out[name] = np.add(arr, delta[name])
        else:
            acc = arr.astype(np.float64) + float(lam) * delta[name].astype(np.float64)
            out[name] = acc.astype(np.float32)
    return TensorMap(out)

"""Binary tensor-container reader/writer.

Layout: an 8-byte little-endian unsigned header length N, then N bytes of
UTF-8 JSON mapping tensor name -> {dtype, shape, data_offsets:[begin,end)},
then the tightly packed little-endian tensor data. A reserved
"__metadata__" header key carries a string-to-string map (used for merge
provenance). Writers emit names in lexicographic order so identical inputs
produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from skillmerge.errors import ContainerFormatError, NonFiniteError

DTYPE_TAGS = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
}
_TAG_BY_KIND = {np.dtype("float64"): "F64", np.dtype("float32"): "F32", np.dtype("float16"): "F16"}

METADATA_KEY = "__metadata__"


def dtype_tag(arr: np.ndarray) -> str:
    tag = _TAG_BY_KIND.get(arr.dtype.newbyteorder("="))
    if tag is None:
        raise ContainerFormatError(f"unsupported dtype {arr.dtype}; expected one of {list(DTYPE_TAGS)}")
    return tag


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> None:
    """Write arrays keyed by name. Array dtypes must be f64/f32/f16; byte
    order is normalized to little-endian on disk."""
    header: dict[str, object] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], order="C")
        tag = dtype_tag(arr)
        blob = arr.astype(DTYPE_TAGS[tag], copy=False).tobytes()
        header[name] = {
            "dtype": tag,
            "shape": [int(s) for s in arr.shape],
            "data_offsets": [offset, offset + len(blob)],
        }
        blobs.append(blob)
        offset += len(blob)
    if metadata is not None:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def read_tensors(
    path: str | Path, validate_finite: bool = True
) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read a container; returns (name -> array in storage dtype, metadata).

    Raises ContainerFormatError on malformed headers, unknown dtypes,
    overlapping or out-of-bounds offsets, and shape/byte-count mismatches.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ContainerFormatError(f"{path}: file shorter than the 8-byte header length")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise ContainerFormatError(f"{path}: declared header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise ContainerFormatError(f"{path}: header JSON must be an object")

    metadata: dict[str, str] = {}
    if METADATA_KEY in header:
        meta = header.pop(METADATA_KEY)
        if not isinstance(meta, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in meta.items()
        ):
            raise ContainerFormatError(f"{path}: {METADATA_KEY} must map strings to strings")
        metadata = meta

    data = raw[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    spans: list[tuple[int, int, str]] = []
    for name, entry in header.items():
        if not isinstance(entry, dict):
            raise ContainerFormatError(f"{path}: entry for {name!r} must be an object")
        try:
            tag = entry["dtype"]
            shape = entry["shape"]
            begin, end = entry["data_offsets"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerFormatError(f"{path}: entry for {name!r} is missing fields ({exc})") from exc
        if tag not in DTYPE_TAGS:
            raise ContainerFormatError(f"{path}: tensor {name!r} has unknown dtype {tag!r}")
        if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
            raise ContainerFormatError(f"{path}: tensor {name!r} has invalid shape {shape!r}")
        begin, end = int(begin), int(end)
        if begin < 0 or end < begin or end > len(data):
            raise ContainerFormatError(
                f"{path}: tensor {name!r} offsets [{begin}, {end}) out of bounds (data size {len(data)})"
            )
        dtype = DTYPE_TAGS[tag]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        if shape == []:
            expected = dtype.itemsize
        if end - begin != expected:
            raise ContainerFormatError(
                f"{path}: tensor {name!r} spans {end - begin} bytes but shape {shape} needs {expected}"
            )
        spans.append((begin, end, name))
        arr = np.frombuffer(data[begin:end], dtype=dtype).reshape(shape).copy()
        if validate_finite and not np.all(np.isfinite(arr.astype(np.float64))):
            raise NonFiniteError(f"{path}: tensor {name!r} contains NaN or Inf")
        tensors[name] = arr

    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise ContainerFormatError(f"{path}: tensors {n0!r} and {n1!r} have overlapping offsets")
    return tensors, metadata

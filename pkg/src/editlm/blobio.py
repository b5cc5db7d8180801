"""Binary container for model and data artifacts.

Every on-disk artifact (corpus, tokenizer, LM checkpoint, token output) uses
the same layout: a magic tag, a JSON manifest, then a sequence of raw array
blobs, each prefixed with its explicit shape. All multi-byte values are
little-endian regardless of host byte order, and the manifest is serialized
with sorted keys, so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"EDLM"
FORMAT_VERSION = 1

# dtype tags allowed in containers; everything is stored little-endian
_DTYPES = {
    "f4": np.dtype("<f4"),
    "f8": np.dtype("<f8"),
    "i4": np.dtype("<i4"),
    "i8": np.dtype("<i8"),
}


class BlobFormatError(ValueError):
    """Raised when a container file is malformed or truncated."""


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, dt in _DTYPES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder(">"):
            return tag
    raise BlobFormatError(f"unsupported blob dtype {arr.dtype!r}")


def dumps_manifest(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path: str, manifest: dict, blobs: list[tuple[str, np.ndarray]]) -> None:
    """Write manifest + named arrays atomically (temp file then rename).

    The manifest must not already contain a "blobs" key; blob names, dtypes
    and shapes are recorded there so readers can validate without seeking.
    """
    if "blobs" in manifest:
        raise BlobFormatError("manifest must not predefine 'blobs'")
    entries = []
    for name, arr in blobs:
        entries.append({"name": name, "dtype": _dtype_tag(arr), "shape": list(arr.shape)})
    full = dict(manifest)
    full["format_version"] = FORMAT_VERSION
    full["blobs"] = entries
    payload = dumps_manifest(full)

    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".tmp-", suffix=".edlm")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
            for name, arr in blobs:
                # asarray + tobytes(order="C") keeps 0-d shapes intact
                a = np.asarray(arr, dtype=_DTYPES[_dtype_tag(arr)])
                fh.write(struct.pack("<I", a.ndim))
                fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
                fh.write(a.tobytes(order="C"))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise BlobFormatError(f"truncated container while reading {what}")
    return data


def read_container(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container, returning (manifest, blobs by name).

    Shape prefixes in the stream are cross-checked against the manifest;
    a mismatch or short read raises BlobFormatError naming the blob.
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise BlobFormatError(f"{path}: not a container file (bad magic)")
        (mlen,) = struct.unpack("<I", _read_exact(fh, 4, "manifest length"))
        try:
            manifest = json.loads(_read_exact(fh, mlen, "manifest").decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise BlobFormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
        if manifest.get("format_version") != FORMAT_VERSION:
            raise BlobFormatError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
        blobs: dict[str, np.ndarray] = {}
        for i, entry in enumerate(manifest.get("blobs", [])):
            what = f"blob {i} ({entry.get('name', '?')})"
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, what + " ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, what + " shape"))
            if list(shape) != list(entry["shape"]):
                raise BlobFormatError(f"{path}: {what} shape prefix {shape} != manifest {entry['shape']}")
            dt = _DTYPES.get(entry["dtype"])
            if dt is None:
                raise BlobFormatError(f"{path}: {what} has unknown dtype {entry['dtype']!r}")
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(fh, count * dt.itemsize, what + " data")
            blobs[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise BlobFormatError(f"{path}: trailing bytes after last blob")
    return manifest, blobs

"""On-disk containers.

Matrix archive: a flat binary file of records
``<u32 id_len><id utf-8><u32 rows><u32 cols><rows*cols float32 LE>`` plus a
text sidecar ``<path>.idx`` with ``<utt-id> <byte offset>`` per line.

Tensor file: ``XVKT`` magic, u32 format version, u32 header length, JSON
header, then named float32 tensors ``<u32 name_len><name><u32 ndim><u32 dims...><data>``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import DataError

TENSOR_MAGIC = b"XVKT"
FORMAT_VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _encode_record(utt: str, mat: np.ndarray) -> bytes:
    mat = np.asarray(mat, dtype="<f4")
    if mat.ndim == 1:
        mat = mat[None, :]
    if mat.ndim != 2:
        raise DataError(f"{utt}: archive records must be 2-D, got {mat.shape}")
    key = utt.encode("utf-8")
    if any(c in utt for c in " \t\n"):
        raise DataError(f"utterance id {utt!r} contains whitespace")
    rows, cols = mat.shape
    return struct.pack("<I", len(key)) + key + struct.pack("<II", rows, cols) + np.ascontiguousarray(mat).tobytes()


def write_archive(path, items: Iterable[tuple[str, np.ndarray]]) -> None:
    blob = bytearray()
    index = []
    seen = set()
    for utt, mat in items:
        if utt in seen:
            raise DataError(f"duplicate utterance id {utt!r}")
        seen.add(utt)
        index.append(f"{utt} {len(blob)}\n")
        blob += _encode_record(utt, mat)
    atomic_write_bytes(path, bytes(blob))
    atomic_write_text(str(path) + ".idx", "".join(index))


def _read_record(buf: bytes, offset: int) -> tuple[str, np.ndarray, int]:
    try:
        (klen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        utt = buf[offset : offset + klen].decode("utf-8")
        offset += klen
        rows, cols = struct.unpack_from("<II", buf, offset)
        offset += 8
        n = rows * cols
        mat = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(rows, cols)
    except (struct.error, ValueError) as exc:
        raise DataError(f"corrupt archive record at offset {offset}: {exc}") from exc
    return utt, mat.astype(np.float64), offset + 4 * n


def read_index(path) -> dict[str, int]:
    idx_path = Path(str(path) + ".idx")
    if not idx_path.exists():
        raise DataError(f"missing archive index {idx_path}")
    index = {}
    for line in idx_path.read_text().splitlines():
        if line.strip():
            utt, off = line.split()
            index[utt] = int(off)
    return index


def iter_archive(path) -> Iterator[tuple[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    offset = 0
    while offset < len(buf):
        utt, mat, offset = _read_record(buf, offset)
        yield utt, mat


def read_archive(path) -> dict[str, np.ndarray]:
    return dict(iter_archive(path))


def read_archive_entry(path, utt: str) -> np.ndarray:
    index = read_index(path)
    if utt not in index:
        raise DataError(f"{utt!r} not in archive {path}")
    with open(path, "rb") as fh:
        fh.seek(index[utt])
        head = fh.read(4)
        (klen,) = struct.unpack("<I", head)
        rest = fh.read(klen + 8)
        rows, cols = struct.unpack_from("<II", rest, klen)
        data = fh.read(4 * rows * cols)
    _, mat, _ = _read_record(head + rest + data, 0)
    return mat


def save_tensors(path, tensors: Mapping[str, np.ndarray], header: dict | None = None) -> None:
    head = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    out = bytearray(TENSOR_MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head)
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        key = name.encode("utf-8")
        out += struct.pack("<I", len(key)) + key + struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) + np.ascontiguousarray(arr).tobytes()
    atomic_write_bytes(path, bytes(out))


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != TENSOR_MAGIC:
        raise DataError(f"{path}: not a tensor file")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    tensors = {}
    while offset < len(buf):
        (klen,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset : offset + klen].decode("utf-8")
        offset += klen
        (ndim,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 4 * count
    return header, tensors

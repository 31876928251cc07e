"""Binary tensor files and weight-directory checkpoints.

File layout: magic "ASPT", u8 version (1), u8 dtype (0 = f64, 1 = f32),
u8 rank, rank little-endian u32 extents, then the row-major little-endian
payload. Checkpoints are a directory of one file per named tensor plus a
JSON manifest.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ASPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_CODES = {"f64": 0, "f32": 1}


class FormatError(ValueError):
    """The file is not a valid tensor file."""


def save_tensor(path: str | Path, array: np.ndarray, dtype: str = "f64") -> None:
    if dtype not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype {dtype!r}; use 'f64' or 'f32'")
    code = _DTYPE_CODES[dtype]
    # asarray + astype rather than ascontiguousarray: the latter promotes
    # rank-0 arrays to rank 1
    arr = np.asarray(array).astype(_DTYPES[code], copy=False)
    if arr.ndim > 255:
        raise FormatError("rank exceeds format limit")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def load_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 7:
        raise FormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, code, rank = struct.unpack_from("<BBB", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    offset = 7
    if len(raw) < offset + 4 * rank:
        raise FormatError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{rank}I", raw, offset)
    offset += 4 * rank
    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = raw[offset:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def _file_name(name: str) -> str:
    return name.replace("/", "__").replace(".", "_") + ".aspt"


def save_weight_dir(directory: str | Path, named: dict[str, np.ndarray],
                    extra: dict | None = None) -> None:
    """Persist named arrays as one tensor file each plus manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in named.items():
        fname = _file_name(name)
        save_tensor(directory / fname, arr)
        files[name] = fname
    manifest = {"version": VERSION, "tensors": files}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_weight_dir(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{directory}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text())
    named = {name: load_tensor(directory / fname)
             for name, fname in manifest["tensors"].items()}
    extra = {k: v for k, v in manifest.items() if k not in ("version", "tensors")}
    return named, extra

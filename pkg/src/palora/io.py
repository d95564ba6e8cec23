"""Binary formats: matrices, model checkpoints (with optional adapters) and mask files.

Every file starts with the magic ``PLRA`` and a little-endian u32 format
version. A bare matrix continues with u64 rows, u64 cols and rows*cols
float64 values in row-major order. Checkpoints and mask files follow the
version with a four-byte section tag (``CKPT`` / ``MASK``).
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO, Sequence

import numpy as np

from .adapters import LoraAdapter, MaskPair
from .model import BaseModel, FrozenLayer

MAGIC = b"PLRA"
VERSION = 1
_NO_SEED = -(2**63)


class FormatError(ValueError):
    pass


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise FormatError("unexpected end of file")
    return b


def _unpack(fh: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt)))


def _check_header(fh: BinaryIO) -> None:
    if _read_exact(fh, 4) != MAGIC:
        raise FormatError("bad magic")
    (version,) = _unpack(fh, "<I")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")


def write_matrix(fh: BinaryIO, a: np.ndarray) -> None:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise FormatError("only 2-D matrices can be written")
    fh.write(MAGIC + struct.pack("<IQQ", VERSION, a.shape[0], a.shape[1]))
    fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_matrix(fh: BinaryIO) -> np.ndarray:
    _check_header(fh)
    rows, cols = _unpack(fh, "<QQ")
    data = _read_exact(fh, 8 * rows * cols)
    return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(rows, cols)


def matrix_to_bytes(a) -> bytes:
    import io

    buf = io.BytesIO()
    write_matrix(buf, a)
    return buf.getvalue()


def matrix_from_bytes(b: bytes) -> np.ndarray:
    import io

    return read_matrix(io.BytesIO(b))


def _write_str(fh, s: str) -> None:
    b = s.encode("utf-8")
    fh.write(struct.pack("<Q", len(b)) + b)


def _read_str(fh) -> str:
    (n,) = _unpack(fh, "<Q")
    return _read_exact(fh, n).decode("utf-8")


def _seed_out(seed) -> int:
    return _NO_SEED if seed is None else int(seed)


def _seed_in(v: int):
    return None if v == _NO_SEED else v


def save_checkpoint(path, model: BaseModel, adapters: Sequence[LoraAdapter] | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION) + b"CKPT")
        fh.write(struct.pack("<q", _seed_out(model.provenance.get("seed"))))
        fh.write(struct.pack("<I", model.depth))
        for layer in model.layers:
            _write_str(fh, layer.activation)
            write_matrix(fh, layer.W)
            write_matrix(fh, layer.b)
        adapters = list(adapters or [])
        fh.write(struct.pack("<I", len(adapters)))
        for a in adapters:
            fh.write(struct.pack("<d", a.alpha))
            write_matrix(fh, a.B)
            write_matrix(fh, a.A)
        _write_str(fh, json.dumps(model.provenance, sort_keys=True))


def load_checkpoint(path) -> tuple[BaseModel, list[LoraAdapter]]:
    with open(path, "rb") as fh:
        _check_header(fh)
        if _read_exact(fh, 4) != b"CKPT":
            raise FormatError("not a checkpoint")
        (seed,) = _unpack(fh, "<q")
        (depth,) = _unpack(fh, "<I")
        layers = []
        for _ in range(depth):
            act = _read_str(fh)
            W = read_matrix(fh)
            b = read_matrix(fh)
            layers.append(FrozenLayer(W, b, act))
        (n_adapters,) = _unpack(fh, "<I")
        adapters = []
        for _ in range(n_adapters):
            (alpha,) = _unpack(fh, "<d")
            adapters.append(LoraAdapter(read_matrix(fh), read_matrix(fh), alpha))
        provenance = json.loads(_read_str(fh))
        if _seed_in(seed) != provenance.get("seed"):
            raise FormatError("provenance seed does not match header")
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint")
    return BaseModel(tuple(layers), provenance), adapters


def save_masks(path, masks: Sequence[MaskPair], seed: int | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION) + b"MASK")
        fh.write(struct.pack("<qI", _seed_out(seed), len(masks)))
        for u in masks:
            m, n = u.shape
            fh.write(struct.pack("<QQddq", m, n, u.p_row, u.p_col, _seed_out(u.seed)))
            fh.write(np.packbits(u.u_row).tobytes())
            fh.write(np.packbits(u.u_col).tobytes())


def load_masks(path) -> tuple[list[MaskPair], int | None]:
    with open(path, "rb") as fh:
        _check_header(fh)
        if _read_exact(fh, 4) != b"MASK":
            raise FormatError("not a mask file")
        seed, count = _unpack(fh, "<qI")
        masks = []
        for _ in range(count):
            m, n, p_row, p_col, s = _unpack(fh, "<QQddq")
            u_row = np.unpackbits(np.frombuffer(_read_exact(fh, (m + 7) // 8), np.uint8))[:m]
            u_col = np.unpackbits(np.frombuffer(_read_exact(fh, (n + 7) // 8), np.uint8))[:n]
            masks.append(MaskPair(u_row, u_col, p_row, p_col, _seed_in(s)))
        if fh.read(1):
            raise FormatError("trailing bytes after masks")
    return masks, _seed_in(seed)

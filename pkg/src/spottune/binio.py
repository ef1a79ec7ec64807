"""Little-endian binary reading/writing shared by the dataset and checkpoint formats."""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAX_ELEMENTS = 1 << 31


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: need {n} bytes for {what}, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got == expected[::-1]:
            raise FormatError(f"foreign byte order: magic {got!r}", 0)
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", 0)

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what: str) -> str:
        at = self.pos
        n = self.u32(f"{what} length")
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} is not valid UTF-8", at) from exc

    def f64_array(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        n = _checked_size(shape, self.pos, what)
        raw = self.take(8 * n, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def u32_array(self, n: int, what: str) -> np.ndarray:
        _checked_size((n,), self.pos, what)
        raw = self.take(4 * n, what)
        return np.frombuffer(raw, dtype="<u4").astype(np.int64)

    def end(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


def _checked_size(shape, offset: int, what: str) -> int:
    n = 1
    for s in shape:
        n *= int(s)
        if n > MAX_ELEMENTS:
            raise FormatError(f"dimension overflow in {what}: shape {tuple(shape)}", offset)
    return n


def u32(value: int) -> bytes:
    return struct.pack("<I", value)


def text(value: str) -> bytes:
    raw = value.encode("utf-8")
    return u32(len(raw)) + raw


def f64_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

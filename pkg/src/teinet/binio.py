"""Little-endian binary containers shared by checkpoints (``TEIC``) and datasets (``TEID``)."""
import struct

import numpy as np

from .errors import FormatError

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"TEIC"
DATASET_MAGIC = b"TEID"

_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


class Writer:
    def __init__(self, fh):
        self.fh = fh

    def header(self, magic):
        self.fh.write(magic)
        self.u32(FORMAT_VERSION)

    def u32(self, value):
        self.fh.write(_U32.pack(value))

    def text(self, s):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.fh.write(raw)

    def shape(self, shape):
        self.u32(len(shape))
        for n in shape:
            self.u32(n)

    def f32(self, arr):
        self.fh.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())

    def raw(self, data):
        self.fh.write(data)


class Reader:
    """Cursor over an in-memory buffer; every failure reports its byte offset."""

    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def remaining(self):
        return len(self.buf) - self.pos

    def take(self, n, what):
        if self.remaining() < n:
            raise FormatError(f"truncated file while reading {what}: need {n} bytes, "
                              f"{self.remaining()} left", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def header(self, magic):
        got = bytes(self.take(len(magic), "magic"))
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
        at = self.pos
        version = self.u32("format version")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})", at)

    def u32(self, what="u32"):
        return _U32.unpack(self.take(4, what))[0]

    def text(self, what="string"):
        n = self.u32(f"{what} length")
        try:
            return bytes(self.take(n, what)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} is not valid UTF-8", self.pos - n) from exc

    def shape(self, what="shape"):
        rank = self.u32(f"{what} rank")
        return tuple(self.u32(f"{what} extent") for _ in range(rank))

    def f32(self, count, what="values"):
        return np.frombuffer(self.take(4 * count, what), dtype=_F32).copy()

    def expect_end(self):
        if self.remaining():
            raise FormatError(f"{self.remaining()} unexpected trailing bytes", self.pos)


def write_checkpoint(path, state):
    """Write named float arrays; ``state`` is an ordered mapping name -> array."""
    with open(path, "wb") as fh:
        w = Writer(fh)
        w.header(CHECKPOINT_MAGIC)
        for name, arr in state.items():
            w.text(name)
            w.shape(np.shape(arr))
            w.f32(arr)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        r = Reader(fh.read())
    r.header(CHECKPOINT_MAGIC)
    state = {}
    while r.remaining():
        name = r.text("parameter name")
        shape = r.shape(name)
        state[name] = r.f32(int(np.prod(shape, dtype=np.int64)), name).reshape(shape)
    return state

"""Binary trace files.

Layout (little-endian)::

    0   6s   magic  b"QRTRC1"
    6   u16  format version
    8   u32  sampling period [ns]
    12  u64  record count
    20  u8   encoding: 0 = I/Q float32 pairs, 1 = bit-packed states
    21       payload

Bit-packed payloads store record ``k`` in bit ``k % 8`` of byte ``k // 8``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

MAGIC = b"QRTRC1"
VERSION = 1
ENC_IQ = 0
ENC_BITS = 1
_HEADER = struct.Struct("<6sHIQB")
HEADER_SIZE = _HEADER.size


@dataclass
class TraceFile:
    sampling_period: float      # us
    encoding: int
    data: np.ndarray            # (n, 2) float32 or (n,) uint8
    version: int = VERSION

    @property
    def count(self):
        return len(self.data)


def _payload_size(encoding, count):
    return count * 8 if encoding == ENC_IQ else (count + 7) // 8


def encode_trace(data, sampling_period, encoding=None):
    """Serialise I/Q records (``(n, 2)``) or binary states (``(n,)``) to bytes."""
    arr = np.asarray(data)
    if encoding is None:
        encoding = ENC_IQ if arr.ndim == 2 else ENC_BITS
    ts_ns = int(round(sampling_period * 1000.0))
    if not 0 <= ts_ns < 2 ** 32:
        raise FormatError(f"sampling period {sampling_period} us does not fit the header")
    if encoding == ENC_IQ:
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise FormatError("I/Q encoding needs an (n, 2) array")
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        count = arr.shape[0]
    elif encoding == ENC_BITS:
        bits = arr.reshape(-1)
        if bits.size and (bits.min() < 0 or bits.max() > 1):
            raise FormatError("binary encoding needs 0/1 values")
        payload = np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()
        count = bits.size
    else:
        raise FormatError(f"unknown encoding {encoding}")
    return _HEADER.pack(MAGIC, VERSION, ts_ns, count, encoding) + payload


def decode_trace(buf) -> TraceFile:
    buf = memoryview(buf)
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"header truncated: {len(buf)} of {HEADER_SIZE} bytes", len(buf))
    magic, version, ts_ns, count, enc = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 6)
    if enc not in (ENC_IQ, ENC_BITS):
        raise FormatError(f"unknown encoding flag {enc}", 20)
    need = _payload_size(enc, count)
    have = len(buf) - HEADER_SIZE
    if have < need:
        raise FormatError(f"payload truncated: {have} of {need} bytes", HEADER_SIZE + have)
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after payload", HEADER_SIZE + need)
    body = buf[HEADER_SIZE:]
    if enc == ENC_IQ:
        data = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(count, 2)
    else:
        raw = np.frombuffer(body, dtype=np.uint8)
        data = np.unpackbits(raw, count=count, bitorder="little")
        if count % 8 and raw[-1] >> (count % 8):
            raise FormatError("nonzero padding bits", HEADER_SIZE + need - 1)
    return TraceFile(ts_ns / 1000.0, enc, data, version)


def write_trace(path, data, sampling_period, encoding=None):
    with open(path, "wb") as fh:
        fh.write(encode_trace(data, sampling_period, encoding))


def read_trace(path) -> TraceFile:
    with open(path, "rb") as fh:
        return decode_trace(fh.read())


class TraceWriter:
    """Append records to a trace file whose total count is known up front."""

    def __init__(self, path, sampling_period, encoding, count):
        self.path = path
        self.encoding = encoding
        self.count = int(count)
        self.written = 0
        self._carry = np.zeros(0, dtype=np.uint8)
        self._fh = open(path, "wb")
        ts_ns = int(round(sampling_period * 1000.0))
        self._fh.write(_HEADER.pack(MAGIC, VERSION, ts_ns, self.count, encoding))

    def write(self, data):
        arr = np.asarray(data)
        n = len(arr)
        if self.written + n > self.count:
            raise FormatError("more records than declared", HEADER_SIZE)
        if self.encoding == ENC_IQ:
            self._fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        else:
            bits = np.concatenate([self._carry, arr.astype(np.uint8)])
            full = len(bits) - len(bits) % 8
            self._fh.write(np.packbits(bits[:full], bitorder="little").tobytes())
            self._carry = bits[full:]
        self.written += n

    def close(self):
        if self._fh.closed:
            return
        if len(self._carry):
            self._fh.write(np.packbits(self._carry, bitorder="little").tobytes())
            self._carry = np.zeros(0, dtype=np.uint8)
        self._fh.close()
        if self.written != self.count:
            raise FormatError(f"wrote {self.written} of {self.count} declared records")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            # keep the original error; the short file is left for inspection
            self._fh.close()


def open_trace(path) -> TraceFile:
    """Like :func:`read_trace`, but I/Q payloads are memory-mapped."""
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
        size = fh.seek(0, 2)
    if len(head) < HEADER_SIZE:
        raise FormatError(f"header truncated: {len(head)} of {HEADER_SIZE} bytes", len(head))
    _check_size(head, size)
    _, _, ts_ns, count, enc = _HEADER.unpack(head)
    if enc != ENC_IQ or count == 0:
        return read_trace(path)
    data = np.memmap(path, dtype="<f4", mode="r", offset=HEADER_SIZE, shape=(count, 2))
    return TraceFile(ts_ns / 1000.0, enc, data)


def _check_size(head, size):
    magic, version, _, count, enc = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 6)
    if enc not in (ENC_IQ, ENC_BITS):
        raise FormatError(f"unknown encoding flag {enc}", 20)
    need = HEADER_SIZE + _payload_size(enc, count)
    if size < need:
        raise FormatError(f"payload truncated: {size - HEADER_SIZE} of {need - HEADER_SIZE} bytes", size)
    if size > need:
        raise FormatError(f"{size - need} trailing bytes after payload", need)

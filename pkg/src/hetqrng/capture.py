"""QRAW binary captures of two-channel ADC streams.

Layout (little-endian)::

    magic      4s   b"QRAW"
    version    u16  1
    adc_bits   u16
    sample_rate f64  Hz
    full_scale  f64  V
    lo_power    f64  W
    reserved   32x
    payload    interleaved q,p codes; int8 when adc_bits <= 8 else int16
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .source import SampleBlock, code_dtype, code_limits

MAGIC = b"QRAW"
VERSION = 1
HEADER = struct.Struct("<4sHHddd32x")
HEADER_SIZE = HEADER.size


class CaptureError(ValueError):
    pass


def _payload_dtype(bits: int) -> np.dtype:
    return np.dtype(code_dtype(bits)).newbyteorder("<")


def read_header(fh: BinaryIO) -> tuple[int, float, float, float]:
    raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise CaptureError("truncated header")
    magic, version, bits, rate, full_scale, power = HEADER.unpack(raw)
    if magic != MAGIC:
        raise CaptureError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CaptureError(f"unsupported version {version}")
    if not 2 <= bits <= 16:
        raise CaptureError(f"unsupported bit depth {bits}")
    return bits, rate, full_scale, power


def read_capture(path: str | os.PathLike, block_size: int = 1 << 20) -> Iterator[SampleBlock]:
    """Stream a capture as SampleBlocks of at most ``block_size`` pairs.

    Raises CaptureError on a bad header, a dangling half pair, or codes that
    do not fit the declared bit depth.
    """
    if block_size <= 0:
        raise ValueError("block_size must be > 0")
    with open(path, "rb") as fh:
        bits, rate, full_scale, power = read_header(fh)
        dtype = _payload_dtype(bits)
        pair = 2 * dtype.itemsize
        lo, hi = code_limits(bits)
        offset = 0
        while True:
            raw = fh.read(block_size * pair)
            if not raw:
                return
            if len(raw) % pair:
                raise CaptureError("truncated block: payload ends mid sample pair")
            codes = np.frombuffer(raw, dtype=dtype)
            if bits not in (8, 16) and codes.size and (codes.min() < lo or codes.max() > hi):
                raise CaptureError(f"code outside the {bits}-bit range")
            q = codes[0::2].astype(code_dtype(bits))
            p = codes[1::2].astype(code_dtype(bits))
            yield SampleBlock(q, p, rate, bits, full_scale, power, offset)
            offset += q.size


def write_capture(path: str | os.PathLike, blocks: Iterable[SampleBlock],
                  header: tuple[int, float, float, float] | None = None) -> int:
    """Write blocks to ``path``; returns the total byte count.

    An empty stream writes a header-only file, using ``header``
    ``(adc_bits, sample_rate, full_scale, lo_power)`` when given and zeros
    with 8 bits otherwise.
    """
    it = iter(blocks)
    first = next(it, None)
    meta = first.metadata() if first is not None else (header or (8, 0.0, 0.0, 0.0))
    bits = int(meta[0])
    dtype = _payload_dtype(bits)
    total = 0
    try:
        with open(path, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, VERSION, bits, *map(float, meta[1:])))
            total += HEADER_SIZE
            blk = first
            while blk is not None:
                if blk.metadata() != meta:
                    raise CaptureError("inconsistent metadata between blocks")
                buf = np.empty(2 * len(blk), dtype=dtype)
                buf[0::2] = blk.channel_q
                buf[1::2] = blk.channel_p
                fh.write(buf.tobytes())
                total += buf.nbytes
                blk = next(it, None)
    except CaptureError:
        os.unlink(path)
        raise
    return total

"""Low-bit codec for communicated rows.

Per-row affine quantization with stochastic rounding: each row h is mapped to
integer codes in [0, B] with B = 2^b - 1 via

    hbar = (h - min(h)) / scale,   scale = (max(h) - min(h)) / B

and rounded up with probability equal to the fractional part (unbiased).
Dequantization is the affine inverse, h ~ scale * code + min. Codes are packed
LSB-first, each row padded to a byte boundary. Metadata (min, scale) travels as
float32 per row; bits=32 is a passthrough that skips quantization entirely.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rngstream import RngStream

# u8 version, u8 bits, u16 reserved, u32 num_rows, u32 dim
_HEADER = struct.Struct("<BBHII")
HEADER_BYTES = _HEADER.size
WIRE_VERSION = 1

VALID_BITS = frozenset(range(1, 9)) | {16, 32}


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 1

    def __post_init__(self):
        if self.bits not in VALID_BITS:
            raise CodecError(f"unsupported bit width {self.bits}")

    @property
    def passthrough(self) -> bool:
        return self.bits == 32

    @property
    def bins(self) -> int:
        """Number of quantization bins B = 2^b - 1."""
        if self.passthrough:
            raise CodecError("passthrough mode has no quantization bins")
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class QuantizedBlock:
    """Wire payload: packed codes plus per-row (min, scale) metadata.

    In passthrough mode the payload carries the raw float64 rows and the
    metadata arrays are empty; byte accounting still uses the fp32 basis
    (see payload_bytes / metadata_bytes).
    """

    num_rows: int
    dim: int
    bits: int
    payload: bytes
    row_min: np.ndarray   # float32, shape (num_rows,)
    row_scale: np.ndarray  # float32, shape (num_rows,)

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(WIRE_VERSION, self.bits, 0, self.num_rows, self.dim)
        meta = np.empty((self.num_rows, 2), dtype="<f4")
        meta[:, 0] = self.row_min
        meta[:, 1] = self.row_scale
        return header + meta.tobytes() + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "QuantizedBlock":
        if len(raw) < HEADER_BYTES:
            raise CodecError("truncated block header")
        version, bits, _, num_rows, dim = _HEADER.unpack_from(raw)
        if version != WIRE_VERSION:
            raise CodecError(f"unsupported wire version {version}")
        meta_end = HEADER_BYTES + 8 * num_rows
        meta = np.frombuffer(raw[HEADER_BYTES:meta_end], dtype="<f4").reshape(num_rows, 2)
        block = cls(num_rows=num_rows, dim=dim, bits=bits, payload=raw[meta_end:],
                    row_min=meta[:, 0].copy(), row_scale=meta[:, 1].copy())
        block.validate()
        return block

    def validate(self):
        expect = _stored_payload_bytes(self.num_rows, self.dim, self.bits)
        if len(self.payload) != expect:
            raise CodecError(
                f"payload length {len(self.payload)} != expected {expect} "
                f"(rows={self.num_rows}, dim={self.dim}, bits={self.bits})")


def _row_bytes(d: int, b: int) -> int:
    return (d * b + 7) // 8


def _stored_payload_bytes(rows: int, d: int, b: int) -> int:
    if b == 32:
        return rows * d * 8  # raw float64 passthrough
    return rows * _row_bytes(d, b)


def payload_bytes(rows: int, d: int, b: int) -> int:
    """Main-data byte count for accounting (fp32 basis for passthrough)."""
    if b == 32:
        return rows * d * 4
    return rows * _row_bytes(d, b)


def metadata_bytes(rows: int, b: int = 1) -> int:
    """Per-row (min, scale) float32 pair; passthrough carries none."""
    if b == 32:
        return 0
    return rows * 8


def pack_code_matrix(codes: np.ndarray, b: int) -> bytes:
    """Pack a (rows, d) integer code matrix, LSB-first, rows byte-aligned."""
    codes = np.ascontiguousarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > (1 << b) - 1):
        raise CodecError(f"code out of range for {b}-bit packing")
    if b == 16:
        return codes.astype("<u2").tobytes()
    rows, d = codes.shape
    bits = ((codes[:, :, None].astype(np.uint8) >> np.arange(b, dtype=np.uint8)) & 1)
    packed = np.packbits(bits.reshape(rows, d * b), axis=1, bitorder="little")
    return packed.tobytes()


def unpack_code_matrix(raw: bytes, rows: int, d: int, b: int) -> np.ndarray:
    if len(raw) != rows * _row_bytes(d, b):
        raise CodecError("payload length mismatch")
    if b == 16:
        return np.frombuffer(raw, dtype="<u2").reshape(rows, d).astype(np.int64)
    packed = np.frombuffer(raw, dtype=np.uint8).reshape(rows, _row_bytes(d, b))
    bits = np.unpackbits(packed, axis=1, bitorder="little", count=d * b)
    weights = (1 << np.arange(b)).astype(np.int64)
    return bits.reshape(rows, d, b) @ weights


def pack_codes(codes, b: int) -> bytes:
    """Pack a single row of codes."""
    return pack_code_matrix(np.asarray(codes).reshape(1, -1), b)


def unpack_codes(raw: bytes, d: int, b: int) -> np.ndarray:
    """Unpack a single row of codes."""
    return unpack_code_matrix(raw, 1, d, b)[0]


def quantize_rows(m: np.ndarray, cfg: QuantConfig,
                  rng: RngStream | None = None) -> QuantizedBlock:
    """Quantize a (rows, d) float matrix row by row.

    One uniform is consumed per element in row-major order, so a block's
    bytes replay exactly from the stream key. Constant rows get scale 0 and
    all-zero codes (exact reconstruction).
    """
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if not np.all(np.isfinite(m)):
        raise CodecError("non-finite values in quantizer input")
    rows, d = m.shape

    if cfg.passthrough:
        return QuantizedBlock(rows, d, 32, np.ascontiguousarray(m).tobytes(),
                              np.empty(0, np.float32), np.empty(0, np.float32))

    if rng is None:
        raise CodecError("stochastic rounding requires an RngStream")
    B = cfg.bins
    mn = m.min(axis=1)
    mx = m.max(axis=1)
    # Transmit metadata as float32 and normalize against the transmitted
    # values, so dequantization is unbiased w.r.t. what was actually sent.
    row_min = mn.astype(np.float32)
    row_scale = ((mx - mn) / B).astype(np.float32)
    scale64 = row_scale.astype(np.float64)
    live = scale64 > 0.0

    codes = np.zeros((rows, d), dtype=np.int64)
    u = rng.uniforms(rows * d).reshape(rows, d)
    if np.any(live):
        hbar = (m[live] - row_min[live].astype(np.float64)[:, None]) / scale64[live][:, None]
        lo = np.floor(hbar)
        up = u[live] < (hbar - lo)
        codes[live] = np.clip(lo + up, 0, B).astype(np.int64)

    return QuantizedBlock(rows, d, cfg.bits, pack_code_matrix(codes, cfg.bits),
                          row_min, row_scale)


def dequantize_rows(q: QuantizedBlock) -> np.ndarray:
    """Recover float64 rows: scale * code + min (exact for constant rows)."""
    q.validate()
    if q.bits == 32:
        return np.frombuffer(q.payload, dtype=np.float64).reshape(q.num_rows, q.dim).copy()
    codes = unpack_code_matrix(q.payload, q.num_rows, q.dim, q.bits)
    scale = q.row_scale.astype(np.float64)[:, None]
    mn = q.row_min.astype(np.float64)[:, None]
    return scale * codes + mn

"""Quantization machinery: symmetric uniform codes, mu-law companding,
deterministic/stochastic rounding, nibble packing, and memory accounting.

A quantized tensor is held as a :class:`QuantizedBlock`: packed integer
codes plus one float32 scale per granularity group. Compute always happens
in float64; only the stored representation is low-bit.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import CheckpointError, TruncatedFileError
from .matkit import as_matrix

DETERMINISTIC = "deterministic"
STOCHASTIC = "stochastic"

_SCALE_BITS = 32  # scales are IEEE-754 binary32


class Granularity(enum.IntEnum):
    """Grouping over which one quantization scale is shared.

    Integer values double as the on-disk granularity tag.
    """

    TENSOR = 0
    ROW = 1
    COLUMN = 2
    BLOCK = 3

    @classmethod
    def from_name(cls, name: str) -> "Granularity":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown granularity {name!r}") from None


@dataclass(frozen=True)
class QuantSpec:
    """Quantizer configuration: bit-width, grouping, companding, rounding.

    ``bits=32`` denotes pass-through (no quantization). ``companding_mu=0``
    selects plain uniform quantization; values >= 1 enable mu-law
    companding. ``group_len`` only applies to BLOCK granularity.
    """

    bits: int
    granularity: Granularity = Granularity.TENSOR
    companding_mu: float = 255.0
    rounding: str = DETERMINISTIC
    seed: int = 0
    group_len: int = 128

    def __post_init__(self):
        if self.bits not in (4, 8, 32):
            raise ValueError(f"bits must be 4, 8 or 32, got {self.bits}")
        if not (self.companding_mu == 0.0 or self.companding_mu >= 1.0):
            raise ValueError("companding_mu must be 0 (off) or >= 1")
        if self.rounding not in (DETERMINISTIC, STOCHASTIC):
            raise ValueError(f"unknown rounding mode {self.rounding!r}")
        if self.granularity == Granularity.BLOCK and self.group_len < 2:
            raise ValueError("block group length must be >= 2")

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1

    def uniform(self) -> "QuantSpec":
        """Copy of this spec with companding switched off."""
        return replace(self, companding_mu=0.0)


@dataclass(frozen=True)
class QuantizedBlock:
    """Packed codes + per-group scales for one quantized matrix.

    ``codes`` holds nibble-packed uint8 for 4-bit, int8 for 8-bit, and the
    raw float64 values for 32-bit pass-through. ``scales`` is float32, one
    entry per granularity group (empty for pass-through).
    """

    rows: int
    cols: int
    spec: QuantSpec
    codes: np.ndarray = field(repr=False)
    scales: np.ndarray = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def n_elements(self) -> int:
        return self.rows * self.cols

    @property
    def n_groups(self) -> int:
        return len(self.scales)


def n_groups_for(rows: int, cols: int, spec: QuantSpec) -> int:
    """Number of scale groups implied by shape x granularity (0 for bits=32)."""
    if spec.bits == 32:
        return 0
    g = spec.granularity
    if g == Granularity.TENSOR:
        return 1
    if g == Granularity.ROW:
        return rows
    if g == Granularity.COLUMN:
        return cols
    return -(-(rows * cols) // spec.group_len)


def _group_absmax(a: np.ndarray, spec: QuantSpec) -> np.ndarray:
    g = spec.granularity
    absa = np.abs(a)
    if g == Granularity.TENSOR:
        return np.array([absa.max()])
    if g == Granularity.ROW:
        return absa.max(axis=1)
    if g == Granularity.COLUMN:
        return absa.max(axis=0)
    flat = absa.ravel()
    n = flat.size
    ng = -(-n // spec.group_len)
    padded = np.zeros(ng * spec.group_len)
    padded[:n] = flat
    return padded.reshape(ng, spec.group_len).max(axis=1)


def _expand_groups(vals: np.ndarray, rows: int, cols: int, spec: QuantSpec) -> np.ndarray:
    g = spec.granularity
    if g == Granularity.TENSOR:
        return np.full((rows, cols), vals[0])
    if g == Granularity.ROW:
        return np.broadcast_to(vals[:, None], (rows, cols))
    if g == Granularity.COLUMN:
        return np.broadcast_to(vals[None, :], (rows, cols))
    n = rows * cols
    return np.repeat(vals, spec.group_len)[:n].reshape(rows, cols)


def round_value(z, rounding: str = DETERMINISTIC, rng: np.random.Generator | None = None):
    """Round to integer: half-away-from-zero, or stochastically.

    Stochastic mode rounds down to floor(z) with probability ceil(z) - z
    (unbiased in expectation), driven by ``rng`` (a fresh seed-0 generator
    when omitted). Accepts scalars or arrays.
    """
    a = np.asarray(z, dtype=np.float64)
    if rounding == DETERMINISTIC:
        out = np.copysign(np.floor(np.abs(a) + 0.5), a)
    elif rounding == STOCHASTIC:
        if rng is None:
            rng = np.random.default_rng(0)
        lower = np.floor(a)
        frac = a - lower
        out = lower + (rng.random(a.shape) < frac)
    else:
        raise ValueError(f"unknown rounding mode {rounding!r}")
    if np.ndim(z) == 0:
        return int(out)
    return out.astype(np.int64)


def mulaw(x, mu: float = 255.0):
    """Mu-law compressor sgn(x) * ln(1 + mu|x|) / ln(1 + mu) on [-1, 1].

    Input is clamped to [-1, 1]; odd, strictly increasing, fixes 0 and +-1.
    """
    if mu < 1.0:
        raise ValueError("mu must be >= 1")
    a = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    out = np.sign(a) * np.log1p(mu * np.abs(a)) / np.log1p(mu)
    return float(out) if np.ndim(x) == 0 else out


def mulaw_inv(y, mu: float = 255.0):
    """Mu-law expander sgn(y) * ((1 + mu)^|y| - 1) / mu, inverse of mulaw."""
    if mu < 1.0:
        raise ValueError("mu must be >= 1")
    a = np.clip(np.asarray(y, dtype=np.float64), -1.0, 1.0)
    out = np.sign(a) * (np.power(1.0 + mu, np.abs(a)) - 1.0) / mu
    return float(out) if np.ndim(y) == 0 else out


def _pass_through(a: np.ndarray, spec: QuantSpec) -> QuantizedBlock:
    return QuantizedBlock(a.shape[0], a.shape[1], spec, a.copy(),
                          np.empty(0, dtype=np.float32))


def quant_uniform(x, spec: QuantSpec, rng: np.random.Generator | None = None) -> QuantizedBlock:
    """Symmetric uniform quantization at the spec's granularity.

    Per group: scale s = max|x| / (2^(b-1) - 1) stored in float32, codes
    clamp(round(x / s)). An all-zero group gets scale 0 and codes 0.
    """
    a = as_matrix(x)
    if spec.bits not in (4, 8):
        raise ValueError("quant_uniform requires bits in {4, 8}")
    if spec.companding_mu != 0.0:
        raise ValueError("quant_uniform requires companding_mu = 0; use cquant")
    scales = (_group_absmax(a, spec) / spec.qmax).astype(np.float32)
    s = _expand_groups(scales.astype(np.float64), a.shape[0], a.shape[1], spec)
    z = np.divide(a, s, out=np.zeros_like(a), where=s > 0.0)
    if rng is None and spec.rounding == STOCHASTIC:
        rng = np.random.default_rng(spec.seed)
    q = np.clip(round_value(z, spec.rounding, rng), -spec.qmax, spec.qmax)
    return QuantizedBlock(a.shape[0], a.shape[1], spec, _store_codes(q, spec.bits), scales)


def cquant(x, spec: QuantSpec, rng: np.random.Generator | None = None) -> QuantizedBlock:
    """Mu-law companded quantization.

    Per group the entries are divided by the group max |x| (stored as the
    scale), compressed by the mu-law function, then uniformly coded on
    [-1, 1] with fixed step 1/(2^(b-1)-1). Monotonicity of the compressor
    makes this the companded counterpart of :func:`quant_uniform`, and the
    group-max pre-scaling keeps the compressor inside its domain for any
    finite input.
    """
    a = as_matrix(x)
    if spec.bits not in (4, 8):
        raise ValueError("cquant requires bits in {4, 8}")
    if spec.companding_mu < 1.0:
        raise ValueError("cquant requires companding_mu >= 1; use quant_uniform")
    scales = _group_absmax(a, spec).astype(np.float32)
    s = _expand_groups(scales.astype(np.float64), a.shape[0], a.shape[1], spec)
    u = np.divide(a, s, out=np.zeros_like(a), where=s > 0.0)
    y = mulaw(u, spec.companding_mu)
    if rng is None and spec.rounding == STOCHASTIC:
        rng = np.random.default_rng(spec.seed)
    q = np.clip(round_value(y * spec.qmax, spec.rounding, rng), -spec.qmax, spec.qmax)
    return QuantizedBlock(a.shape[0], a.shape[1], spec, _store_codes(q, spec.bits), scales)


def quantize(x, spec: QuantSpec, rng: np.random.Generator | None = None) -> QuantizedBlock:
    """Dispatch to pass-through, uniform, or companded quantization."""
    if spec.bits == 32:
        return _pass_through(as_matrix(x), spec)
    if spec.companding_mu == 0.0:
        return quant_uniform(x, spec, rng)
    return cquant(x, spec, rng)


def dequant(block: QuantizedBlock) -> np.ndarray:
    """Reconstruct the float64 approximation from a quantized block."""
    spec = block.spec
    if spec.bits == 32:
        return block.codes.reshape(block.rows, block.cols).copy()
    q = codes_of(block).astype(np.float64).reshape(block.rows, block.cols)
    s = _expand_groups(block.scales.astype(np.float64), block.rows, block.cols, spec)
    if spec.companding_mu == 0.0:
        return q * s
    return mulaw_inv(q / spec.qmax, spec.companding_mu) * s


def codes_of(block: QuantizedBlock) -> np.ndarray:
    """Unpacked integer codes of a 4/8-bit block, as int8 of length rows*cols."""
    if block.spec.bits == 4:
        return unpack_nibbles(block.codes, block.n_elements)
    if block.spec.bits == 8:
        return block.codes.copy()
    raise ValueError("pass-through blocks have no integer codes")


def _store_codes(q: np.ndarray, bits: int) -> np.ndarray:
    flat = q.ravel()
    if bits == 4:
        return pack_nibbles(flat)
    return flat.astype(np.int8)


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    """Pack 4-bit codes in [-7, 7] two per byte.

    Codes are biased to code+8 in [1, 15]; nibble 0 is reserved for the
    padding slot when the length is odd. Even indices land in the low
    nibble.
    """
    flat = np.asarray(codes).ravel()
    if flat.size and (flat.min() < -7 or flat.max() > 7):
        raise ValueError("4-bit codes must lie in [-7, 7]")
    u = (flat + 8).astype(np.uint8)
    if u.size % 2:
        u = np.concatenate([u, np.zeros(1, dtype=np.uint8)])
    return (u[0::2] | (u[1::2] << 4)).astype(np.uint8)


def unpack_nibbles(packed: np.ndarray, count: int) -> np.ndarray:
    """Inverse of :func:`pack_nibbles`; returns int8 codes of length count."""
    p = np.asarray(packed, dtype=np.uint8)
    if count > 2 * p.size:
        raise ValueError(f"packed buffer too short for {count} codes")
    out = np.empty(2 * p.size, dtype=np.int16)
    out[0::2] = p & 0x0F
    out[1::2] = p >> 4
    return (out[:count] - 8).astype(np.int8)


class MemoryFootprint(NamedTuple):
    code_bits: int
    scale_bits: int
    total_bytes: int


def _packed_code_bytes(n_elements: int, bits: int) -> int:
    if bits == 4:
        return (n_elements + 1) // 2
    return n_elements * (bits // 8)


def footprint_from_shape(rows: int, cols: int, spec: QuantSpec) -> MemoryFootprint:
    """Closed-form memory accounting for a would-be block of this shape.

    Pass-through blocks are charged their nominal 32 bits per element and
    carry no scales.
    """
    n = rows * cols
    groups = n_groups_for(rows, cols, spec)
    return MemoryFootprint(
        code_bits=spec.bits * n,
        scale_bits=_SCALE_BITS * groups,
        total_bytes=_packed_code_bytes(n, spec.bits) + 4 * groups,
    )


def memory_footprint(blocks: list[QuantizedBlock]) -> MemoryFootprint:
    """Exact integer memory accounting over materialized blocks.

    ``code_bits`` is bit-width x elements, ``scale_bits`` is 32 per stored
    scale, and ``total_bytes`` includes nibble-packing padding per block.
    """
    code_bits = scale_bits = total_bytes = 0
    for b in blocks:
        code_bits += b.spec.bits * b.n_elements
        scale_bits += _SCALE_BITS * b.n_groups
        total_bytes += _packed_code_bytes(b.n_elements, b.spec.bits) + 4 * b.n_groups
    return MemoryFootprint(code_bits, scale_bits, total_bytes)


# --- checkpoint wire format -------------------------------------------------
#
# Per-block section layout, little-endian:
#   u32 rows, u32 cols, u8 bits, u8 granularity tag (0=tensor, 1=row,
#   2=column, 3=block) followed by u32 group length when the tag is 3,
#   f32 mu, u64 scale count, scales as f32[], u64 packed byte count,
#   packed codes (nibble layout above; int8 for 8-bit; raw f64 for
#   pass-through blocks).


class ByteReader:
    """Cursor over a byte buffer that raises TruncatedFileError on underrun."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"needed {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def at_end(self) -> bool:
        return self.pos == len(self.data)


def encode_block(block: QuantizedBlock) -> bytes:
    spec = block.spec
    parts = [struct.pack("<IIBB", block.rows, block.cols, spec.bits, int(spec.granularity))]
    if spec.granularity == Granularity.BLOCK:
        parts.append(struct.pack("<I", spec.group_len))
    parts.append(struct.pack("<f", spec.companding_mu))
    parts.append(struct.pack("<Q", len(block.scales)))
    parts.append(block.scales.astype("<f4").tobytes())
    if spec.bits == 32:
        payload = block.codes.ravel().astype("<f8").tobytes()
    else:
        payload = block.codes.tobytes()
    parts.append(struct.pack("<Q", len(payload)))
    parts.append(payload)
    return b"".join(parts)


def decode_block(reader: ByteReader) -> QuantizedBlock:
    rows, cols, bits, tag = reader.unpack("<IIBB")
    try:
        gran = Granularity(tag)
    except ValueError:
        raise CheckpointError(f"unknown granularity tag {tag}") from None
    group_len = 128
    if gran == Granularity.BLOCK:
        (group_len,) = reader.unpack("<I")
    (mu,) = reader.unpack("<f")
    (n_scales,) = reader.unpack("<Q")
    scales = np.frombuffer(reader.take(4 * n_scales), dtype="<f4").copy()
    (n_bytes,) = reader.unpack("<Q")
    raw = reader.take(n_bytes)
    spec = QuantSpec(bits=bits, granularity=gran, companding_mu=float(mu),
                     group_len=group_len)
    n = rows * cols
    if bits == 32:
        if n_bytes != 8 * n or n_scales != 0:
            raise CheckpointError("inconsistent pass-through block")
        codes = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
    else:
        if n_scales != n_groups_for(rows, cols, spec):
            raise CheckpointError("scale count does not match shape and granularity")
        if n_bytes != _packed_code_bytes(n, bits):
            raise CheckpointError("code byte count does not match shape")
        dtype = np.uint8 if bits == 4 else np.int8
        codes = np.frombuffer(raw, dtype=dtype).copy()
    return QuantizedBlock(rows, cols, spec, codes, scales)

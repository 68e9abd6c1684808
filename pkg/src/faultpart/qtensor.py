"""Fixed-point tensors, quantization, and LSB bit-flip fault injection.

Values are N_q-bit signed two's-complement integers with a power-of-two
scale: real ~= value * 2**scale_exp. Keeping scales to powers of two makes
requantization an arithmetic shift, so results are bit-exact everywhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

SUPPORTED_BIT_WIDTHS = (8, 16, 32)

INT_DTYPES = {8: np.int8, 16: np.int16, 32: np.int32}
UINT_DTYPES = {8: np.uint8, 16: np.uint16, 32: np.uint32}

TENSOR_MAGIC = b"AFQT"
TENSOR_FORMAT_VERSION = 1

_MASK64 = (1 << 64) - 1

# diagnostic counter, see injection_call_count()
_injection_calls = 0


def _mix64(a: int, b: int) -> int:
    """splitmix64-style avalanche of two 64-bit words into one."""
    z = (a + 0x9E3779B97F4A7C15 * (b + 1)) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class RngStream:
    """Immutable handle for a deterministic random stream.

    Identical (seed, stream_id) pairs always produce identical draw
    sequences. Independent consumers must use distinct streams; derive
    them with child() rather than sharing a stateful generator.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        """Fresh counter-based generator for this stream."""
        key = [self.seed & _MASK64, self.stream_id & _MASK64]
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *indices: int) -> "RngStream":
        """Sub-stream addressed by one or more integer indices."""
        sid = self.stream_id
        for ix in indices:
            sid = _mix64(sid, ix)
        return RngStream(self.seed, sid)


def _min_max(bit_width: int) -> tuple[int, int]:
    return -(1 << (bit_width - 1)), (1 << (bit_width - 1)) - 1


@dataclass(frozen=True, eq=False)
class QuantTensor:
    """Flat array of N_q-bit signed integers plus shape and scale.

    Instances are immutable: the values buffer is copied in and marked
    read-only, so tensors can be shared across threads freely.
    """

    shape: tuple[int, ...]
    values: np.ndarray
    bit_width: int = 16
    scale_exp: int = 0

    def __post_init__(self):
        if self.bit_width not in SUPPORTED_BIT_WIDTHS:
            raise ValueError(f"unsupported bit width {self.bit_width}")
        shape = tuple(int(d) for d in self.shape)
        if any(d <= 0 for d in shape):
            raise ValueError(f"non-positive dim in shape {shape}")
        dtype = INT_DTYPES[self.bit_width]
        values = np.ascontiguousarray(self.values, dtype=dtype).reshape(-1).copy()
        if values.size != int(np.prod(shape)):
            raise ValueError(
                f"values length {values.size} does not match shape {shape}"
            )
        values.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "scale_exp", int(self.scale_exp))

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.bit_width == other.bit_width
            and self.scale_exp == other.scale_exp
            and bool(np.array_equal(self.values, other.values))
        )

    @property
    def size(self) -> int:
        return self.values.size

    def ndarray(self) -> np.ndarray:
        """Read-only view of the values in tensor shape."""
        return self.values.reshape(self.shape)

    def with_values(self, values: np.ndarray) -> "QuantTensor":
        """Same shape/width/scale, new values."""
        return QuantTensor(self.shape, values, self.bit_width, self.scale_exp)


def quantize(real_values, bit_width: int = 16, scale_exp: int = 0) -> QuantTensor:
    """Quantize reals to fixed point: round-half-to-even then saturate.

    Each output value is rint(real / 2**scale_exp) clamped to the
    representable N_q-bit range. Non-finite inputs are rejected with the
    flat index of the first offender.
    """
    if bit_width not in SUPPORTED_BIT_WIDTHS:
        raise ValueError(f"unsupported bit width {bit_width}")
    arr = np.asarray(real_values, dtype=np.float64)
    finite = np.isfinite(arr)
    if not finite.all():
        bad = int(np.flatnonzero(~finite.ravel())[0])
        raise ValueError(f"non-finite input at flat index {bad}")
    lo, hi = _min_max(bit_width)
    scaled = np.rint(np.ldexp(arr, -scale_exp))
    clipped = np.clip(scaled, lo, hi).astype(INT_DTYPES[bit_width])
    shape = arr.shape if arr.shape else (1,)
    return QuantTensor(shape, clipped.reshape(-1), bit_width, scale_exp)


def dequantize(t: QuantTensor) -> np.ndarray:
    """Back to reals: value * 2**scale_exp, exact in float64."""
    return np.ldexp(t.values.astype(np.float64), t.scale_exp).reshape(t.shape)


def flip_bit(value: int, i: int, bit_width: int = 16) -> int:
    """XOR bit i of a two's-complement value, staying in range."""
    if not 0 <= i < bit_width:
        raise ValueError(f"bit index {i} out of range for {bit_width}-bit value")
    lo, hi = _min_max(bit_width)
    if not lo <= value <= hi:
        raise ValueError(f"value {value} not representable in {bit_width} bits")
    u = (value & ((1 << bit_width) - 1)) ^ (1 << i)
    return u - (1 << bit_width) if u > hi else u


def inject_faults(
    t: QuantTensor,
    fault_rate: float,
    faulty_bits: int,
    rng: RngStream,
    max_flips: int | None = None,
) -> tuple[QuantTensor, int]:
    """Flip each of the b lowest bits of every element with prob fault_rate.

    Returns the faulted copy and the exact number of flips applied. The
    input tensor is never modified. With max_flips set, candidate flips
    beyond the cap are dropped in (element index, bit index) order.

    Replaying the same RngStream re-applies the identical flip set, so a
    double injection restores the original tensor.
    """
    global _injection_calls
    _injection_calls += 1
    if not 0.0 <= fault_rate <= 1.0:
        raise ValueError(f"fault rate {fault_rate} outside [0, 1]")
    if not 1 <= faulty_bits <= t.bit_width:
        raise ValueError(
            f"faulty_bits {faulty_bits} outside [1, {t.bit_width}]"
        )
    if max_flips is not None and max_flips < 0:
        raise ValueError(f"max_flips {max_flips} negative")

    if fault_rate == 0.0 or max_flips == 0:
        return t, 0

    gen = rng.generator()
    hits = gen.random((t.size, faulty_bits)) < fault_rate
    if max_flips is not None:
        flat = hits.reshape(-1)
        excess = np.cumsum(flat) > max_flips
        flat[excess] = False
    count = int(hits.sum())
    if count == 0:
        return t, 0

    udtype = UINT_DTYPES[t.bit_width]
    bit_values = (np.uint64(1) << np.arange(faulty_bits, dtype=np.uint64))
    mask = (hits * bit_values).sum(axis=1).astype(udtype)
    flipped = (t.values.view(udtype) ^ mask).view(INT_DTYPES[t.bit_width])
    return t.with_values(flipped), count


def injection_call_count() -> int:
    """Total inject_faults calls since import or the last reset."""
    return _injection_calls


def reset_injection_call_count() -> None:
    global _injection_calls
    _injection_calls = 0


# ---------------------------------------------------------------------------
# Fixed-point rounding primitives (shared by the inference kernels)
# ---------------------------------------------------------------------------

def shift_round_half_even(x: np.ndarray, shift: int) -> np.ndarray:
    """Arithmetic right shift by `shift` with round-half-to-even.

    x must be an integer array; shift >= 0. shift == 0 is the identity.
    """
    if shift < 0:
        raise ValueError("shift must be non-negative")
    if shift == 0:
        return x.copy()
    q = x >> shift
    r = x - (q << shift)  # in [0, 2**shift), also for negative x
    half = 1 << (shift - 1)
    round_up = (r > half) | ((r == half) & ((q & 1) == 1))
    return q + round_up


def div_round_half_even(x: np.ndarray, divisor: int) -> np.ndarray:
    """Integer division with round-half-to-even, divisor > 0."""
    if divisor <= 0:
        raise ValueError("divisor must be positive")
    q = x // divisor
    r = x - q * divisor
    round_up = (2 * r > divisor) | ((2 * r == divisor) & ((q & 1) == 1))
    return q + round_up


def saturate(x: np.ndarray, bit_width: int) -> np.ndarray:
    """Clamp an integer array to the N_q-bit signed range."""
    lo, hi = _min_max(bit_width)
    return np.clip(x, lo, hi)


# ---------------------------------------------------------------------------
# Binary tensor format
# ---------------------------------------------------------------------------

def tensor_to_bytes(t: QuantTensor) -> bytes:
    """Serialize: 'AFQT', version u32, bit_width u32, scale_exp i32,
    rank u32, dims u32[rank], then raw little-endian signed values."""
    head = TENSOR_MAGIC + struct.pack(
        "<IIiI", TENSOR_FORMAT_VERSION, t.bit_width, t.scale_exp, len(t.shape)
    )
    dims = struct.pack(f"<{len(t.shape)}I", *t.shape)
    data = t.values.astype(f"<i{t.bit_width // 8}").tobytes()
    return head + dims + data


def tensor_from_bytes(blob: bytes) -> QuantTensor:
    if blob[:4] != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {blob[:4]!r}")
    version, bit_width, scale_exp, rank = struct.unpack_from("<IIiI", blob, 4)
    if version != TENSOR_FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    if bit_width not in SUPPORTED_BIT_WIDTHS:
        raise ValueError(f"unsupported bit width {bit_width}")
    offset = 4 + 16
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    n = int(np.prod(dims)) if rank else 0
    values = np.frombuffer(blob, dtype=f"<i{bit_width // 8}", count=n, offset=offset)
    if values.size != n:
        raise ValueError("tensor payload truncated")
    return QuantTensor(tuple(dims), values.astype(INT_DTYPES[bit_width]),
                       bit_width, scale_exp)


def save_tensor(t: QuantTensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> QuantTensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())

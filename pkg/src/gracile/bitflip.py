"""Exact single-bit corruption of stored parameter values.

Bit positions are 1-based over the little-endian value word:

    float32:  position 32 = sign, 31..24 = exponent MSB..LSB,
              23..1 = mantissa MSB..LSB  (raw mask is ``1 << (position-1)``)
    uint8:    position 8 = MSB .. position 1 = LSB
    binary:   a parameter holds -1 or +1; the only corruption is negation

Directed flips (0->1, 1->0) are no-ops when the addressed bit does not hold
the required value; the caller learns this through the ``applied`` flag.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

F32_POSITIONS = 32
QUANT8_POSITIONS = 8
SIGN_POSITION = 32
EXPONENT_POSITIONS = tuple(range(24, 32))  # 24..31, MSB at 31


class FlipDirection(Enum):
    ZERO_TO_ONE = "0to1"
    ONE_TO_ZERO = "1to0"
    UNCONDITIONAL = "any"

    @classmethod
    def parse(cls, text: str) -> "FlipDirection":
        for member in cls:
            if member.value == text:
                return member
        raise ValueError(f"unknown flip direction {text!r}")


@dataclass(frozen=True)
class ParameterRef:
    """A single scalar parameter: tensor name plus flat element index."""

    tensor: str
    index: int


@dataclass(frozen=True)
class BitLocation:
    """The atomic corruption: one bit of one stored parameter."""

    param: ParameterRef
    position: int
    direction: FlipDirection


def _check_position(position: int, width: int) -> None:
    if not 1 <= position <= width:
        raise ValueError(f"bit position {position} out of range 1..{width}")


def flip_bits_u32(bits: int, position: int, direction: FlipDirection) -> tuple[int, bool]:
    """Flip one bit of a 32-bit pattern, honouring the direction precondition."""
    _check_position(position, F32_POSITIONS)
    mask = 1 << (position - 1)
    is_set = bool(bits & mask)
    if direction is FlipDirection.ZERO_TO_ONE and is_set:
        return bits, False
    if direction is FlipDirection.ONE_TO_ZERO and not is_set:
        return bits, False
    return bits ^ mask, True


def f32_to_bits(value: float) -> int:
    # View the bits rather than converting through float64, which would quiet
    # signaling-NaN patterns that directed flips can produce.
    return int(np.asarray(value, dtype="<f4").view("<u4")[()])


def bits_to_f32(bits: int) -> np.float32:
    return np.frombuffer(struct.pack("<I", bits), dtype="<f4")[0]


def flip_f32(value: float, position: int, direction: FlipDirection) -> tuple[np.float32, bool]:
    """Flip one bit of a float32 value. Total: inf/NaN/denormal results are returned verbatim."""
    bits, applied = flip_bits_u32(f32_to_bits(value), position, direction)
    return bits_to_f32(bits), applied


def flip_quant8(value: int, position: int, direction: FlipDirection) -> tuple[int, bool]:
    """Flip one bit of an 8-bit quantized parameter."""
    _check_position(position, QUANT8_POSITIONS)
    if not 0 <= value <= 255:
        raise ValueError(f"quant8 value {value} out of range 0..255")
    mask = 1 << (position - 1)
    is_set = bool(value & mask)
    if direction is FlipDirection.ZERO_TO_ONE and is_set:
        return value, False
    if direction is FlipDirection.ONE_TO_ZERO and not is_set:
        return value, False
    return value ^ mask, True


def flip_binary(value: int) -> int:
    """Negate a binarized parameter (+1 <-> -1)."""
    if value not in (-1, 1):
        raise ValueError(f"binary parameter must be -1 or +1, got {value}")
    return -value


@dataclass(frozen=True)
class FlipToken:
    """Undo record for one applied (or skipped) flip."""

    location: BitLocation
    applied: bool
    previous: int  # raw stored word (u32 bits / u8 code / i8 sign) before the flip


def apply_flip(store, location: BitLocation) -> FlipToken:
    """Mutate one element of a parameter store; returns the token needed to revert.

    Flips may produce inf/NaN/denormals; they are stored verbatim so the sweep
    can measure their downstream effect.
    """
    tensor = store[location.param.tensor]
    idx = location.param.index
    if not 0 <= idx < tensor.data.size:
        raise IndexError(
            f"parameter index {idx} out of range for tensor "
            f"{location.param.tensor!r} of size {tensor.data.size}"
        )
    if tensor.dtype == "f32":
        words = tensor.data.view(np.uint32).reshape(-1)
        old = int(words[idx])
        new, applied = flip_bits_u32(old, location.position, location.direction)
        if applied:
            words[idx] = new
            store.bump_version(location.param.tensor)
        return FlipToken(location, applied, old)
    if tensor.dtype == "u8-quant":
        codes = tensor.data.reshape(-1)
        old = int(codes[idx])
        new, applied = flip_quant8(old, location.position, location.direction)
        if applied:
            codes[idx] = new
            store.bump_version(location.param.tensor)
        return FlipToken(location, applied, old)
    if tensor.dtype == "i8-binary":
        signs = tensor.data.reshape(-1)
        old = int(signs[idx])
        signs[idx] = flip_binary(old)
        store.bump_version(location.param.tensor)
        return FlipToken(location, True, old)
    raise ValueError(f"unsupported tensor dtype {tensor.dtype!r}")


def revert_flip(store, token: FlipToken) -> None:
    """Restore the bit-exact pre-flip value recorded in the token."""
    if not token.applied:
        return
    tensor = store[token.location.param.tensor]
    idx = token.location.param.index
    if tensor.dtype == "f32":
        tensor.data.view(np.uint32).reshape(-1)[idx] = token.previous
    else:
        tensor.data.reshape(-1)[idx] = token.previous
    store.bump_version(token.location.param.tensor)

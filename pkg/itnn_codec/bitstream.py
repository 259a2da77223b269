"""Bit-level writer and reader with exp-Golomb codes."""

from __future__ import annotations

import numpy as np

from itnn_codec.errors import TruncatedStreamError
from itnn_codec.transform import code_num_to_signed, signed_to_code_num


class BitWriter:
    """Append-only bit sequence, MSB first."""

    def __init__(self) -> None:
        """Initialize an empty writer."""
        self._bits = bytearray()

    def __len__(self) -> int:
        """Number of bits written."""
        return len(self._bits)

    def write_bit(self, bit: int) -> None:
        """Append one bit."""
        self._bits.append(1 if bit else 0)

    def write_bits(self, value: int, count: int) -> None:
        """Append ``value`` as a ``count``-bit unsigned integer."""
        for shift in range(count - 1, -1, -1):
            self._bits.append((value >> shift) & 1)

    def write_ue(self, value: int) -> None:
        """Unsigned exp-Golomb (k=0)."""
        value += 1
        length = value.bit_length()
        self.write_bits(0, length - 1)
        self.write_bits(value, length)

    def write_se(self, value: int) -> None:
        """Signed exp-Golomb (k=0)."""
        self.write_ue(int(signed_to_code_num(value)))

    def to_bytes(self) -> bytes:
        """Bits packed MSB first, zero padded to a whole byte."""
        return np.packbits(np.frombuffer(bytes(self._bits), dtype=np.uint8)).tobytes()


class BitReader:
    """Sequential reader over a packed bit payload."""

    def __init__(self, data: bytes, bit_length: int | None = None) -> None:
        """Initialize the reader.

        Args:
            data: Packed payload.
            bit_length: Number of meaningful bits; defaults to the whole payload.
        """
        self._bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
        self._end = len(self._bits) if bit_length is None else bit_length
        if self._end > len(self._bits):
            msg = f"Payload holds {len(self._bits)} bits, header declares {self._end}"
            raise TruncatedStreamError(msg)
        self.position = 0

    @property
    def remaining(self) -> int:
        """Bits left before the end of the payload."""
        return self._end - self.position

    def read_bit(self) -> int:
        """Read one bit."""
        if self.position >= self._end:
            msg = f"Unexpected end of bitstream at bit {self.position}"
            raise TruncatedStreamError(msg)
        bit = int(self._bits[self.position])
        self.position += 1
        return bit

    def read_bits(self, count: int) -> int:
        """Read a ``count``-bit unsigned integer."""
        value = 0
        for _ in range(count):
            value = (value << 1) | self.read_bit()
        return value

    def read_ue(self) -> int:
        """Unsigned exp-Golomb (k=0)."""
        zeros = 0
        while not self.read_bit():
            zeros += 1
        return ((1 << zeros) | self.read_bits(zeros)) - 1

    def read_se(self) -> int:
        """Signed exp-Golomb (k=0)."""
        return code_num_to_signed(self.read_ue())

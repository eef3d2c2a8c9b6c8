"""Adaptive binary range coder and the binarisations built on it.

The coder is a carry-propagating 32-bit range coder (the LZMA construction)
with 16-bit adaptive probabilities. See FORMAT.md for the exact state
machine; the short version:

* state: ``low`` (33 bits, with carry), ``range`` (32 bits), initial range
  ``0xFFFFFFFF``.
* context: ``p`` = probability of a 0 bin scaled to 2**16, initial 32768,
  plus an update count. ``bound = (range >> 16) * p``.
* update: ``shift = min(bit_length(count + 2) - 1, 7)``; after a 0 bin
  ``p += (65536 - p) >> shift``, after a 1 bin ``p -= p >> shift``.
* renormalise whenever ``range < 2**24`` by shifting out one byte.
* the first output byte (always 0) is not stored; at the end the encoder
  picks the value in [low, low + range) with the most trailing zero bits,
  flushes it and strips trailing 0x00 bytes. The decoder reads 0x00 past the
  end of the stream.
"""

from __future__ import annotations

from .errors import FormatError

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
PROB_BITS = 16
PROB_ONE = 1 << PROB_BITS


class EntropyDecodeError(FormatError):
    pass


class Context:
    __slots__ = ("p", "n")

    def __init__(self):
        self.p = PROB_ONE >> 1
        self.n = 0

    def update(self, bit: int) -> None:
        # rate ~ 1/(n + 2) rounded to a power of two, down to 1/128
        shift = (self.n + 2).bit_length() - 1
        if shift > 7:
            shift = 7
        if bit:
            self.p -= self.p >> shift
        else:
            self.p += (PROB_ONE - self.p) >> shift
        self.n += 1


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._first = True

    def _shift_low(self) -> None:
        low = self.low
        if low < 0xFF000000 or low > MASK32:
            carry = low >> 32
            temp = self.cache
            while True:
                byte = (temp + carry) & 0xFF
                if self._first:
                    self._first = False
                else:
                    self.out.append(byte)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, bit: int, ctx: Context) -> None:
        bound = (self.range >> PROB_BITS) * ctx.p
        if bit:
            self.low += bound
            self.range -= bound
        else:
            self.range = bound
        ctx.update(bit)
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bypass(self, bit: int) -> None:
        self.range >>= 1
        if bit:
            self.low += self.range
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        low, rng = self.low, self.range
        last = low + rng - 1
        for k in range(32, -1, -1):
            mask = (1 << k) - 1
            v = (low + mask) & ~mask
            if v <= last:
                self.low = v
                break
        for _ in range(5):
            self._shift_low()
        out = bytes(self.out)
        return out.rstrip(b"\x00")


class RangeDecoder:
    def __init__(self, data: bytes, base_offset: int = 0):
        self.data = data
        self.pos = 0
        self.base_offset = base_offset
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        pos = self.pos
        self.pos += 1
        if pos < len(self.data):
            return self.data[pos]
        # stripped trailing zeros; symbol counts bound how far this goes
        return 0

    @property
    def offset(self) -> int:
        return self.base_offset + min(self.pos, len(self.data))

    def decode(self, ctx: Context) -> int:
        bound = (self.range >> PROB_BITS) * ctx.p
        if self.code < bound:
            self.range = bound
            bit = 0
        else:
            self.code -= bound
            self.range -= bound
            bit = 1
        ctx.update(bit)
        while self.range < TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._byte()) & MASK32
        return bit

    def decode_bypass(self) -> int:
        self.range >>= 1
        if self.code >= self.range:
            self.code -= self.range
            bit = 1
        else:
            bit = 0
        while self.range < TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._byte()) & MASK32
        return bit

    def check_consistent(self) -> None:
        """A conforming stream never leaves code >= range."""
        if self.code >= self.range:
            raise EntropyDecodeError("range coder state inconsistent", self.offset)


# ---------------------------------------------------------------- binarisation


class UIntModel:
    """Adaptive Exp-Golomb: unary prefix of ctx-coded bins, bypass suffix.

    ``v + 1`` is written as ``k`` one-bins and a zero-bin (bin ``i`` uses
    context ``min(i, n - 1)``), followed by the low ``k`` bits of ``v + 1``
    MSB first in bypass mode.
    """

    MAX_PREFIX = 40

    def __init__(self, n_ctx: int = 12):
        self.ctx = [Context() for _ in range(n_ctx)]

    def encode(self, enc: RangeEncoder, v: int) -> None:
        if v < 0:
            raise ValueError("UIntModel encodes nonnegative values")
        w = v + 1
        k = w.bit_length() - 1
        last = len(self.ctx) - 1
        for i in range(k):
            enc.encode(1, self.ctx[i if i < last else last])
        enc.encode(0, self.ctx[k if k < last else last])
        for i in range(k - 1, -1, -1):
            enc.encode_bypass((w >> i) & 1)

    def decode(self, dec: RangeDecoder) -> int:
        k = 0
        last = len(self.ctx) - 1
        while dec.decode(self.ctx[k if k < last else last]):
            k += 1
            if k > self.MAX_PREFIX:
                raise EntropyDecodeError("Exp-Golomb prefix too long", dec.offset)
        w = 1
        for _ in range(k):
            w = (w << 1) | dec.decode_bypass()
        return w - 1


class SignedModel:
    """Zero flag, sign flag, then magnitude - 1 through :class:`UIntModel`."""

    def __init__(self, n_ctx: int = 12):
        self.zero = Context()
        self.sign = Context()
        self.mag = UIntModel(n_ctx)

    def encode(self, enc: RangeEncoder, v: int) -> None:
        enc.encode(1 if v == 0 else 0, self.zero)
        if v == 0:
            return
        enc.encode(1 if v < 0 else 0, self.sign)
        self.mag.encode(enc, abs(v) - 1)

    def decode(self, dec: RangeDecoder) -> int:
        if dec.decode(self.zero):
            return 0
        neg = dec.decode(self.sign)
        m = self.mag.decode(dec) + 1
        return -m if neg else m

"""Sign quantizer, straight-through gradient, scaling factors and bit packing.

Bit layout (frozen, also used on disk): row-major, ``ceil(cols / 64)``
little-endian uint64 words per row, logical bit ``i`` at word ``i // 64``,
position ``i % 64`` counted from the least-significant bit. A set bit means
+1, a clear bit means -1. Pad bits past ``logical_cols`` are always 0.
"""
from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError, ShapeError
from .tensor import as_matrix


def sign(x):
    """Real-valued sign with ``sign(0) == sign(-0.0) == +1``."""
    x = np.asarray(x)
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype if x.dtype.kind == "f" else np.float32)


def ste_grad(x, upstream):
    """Backward of sign: pass ``upstream`` where ``|x| <= 1``, zero elsewhere."""
    x = np.asarray(x)
    out = np.where(np.abs(x) <= 1.0, upstream, 0.0)
    return float(out) if out.ndim == 0 else out


def scale_factor(w_row):
    """L1 mean ``(1/n) * sum |w_i|``, the least-squares scale for ``sign(w)``."""
    w = np.asarray(w_row, dtype=np.float64).ravel()
    if w.size == 0:
        raise ShapeError("scale_factor of an empty vector")
    return float(np.mean(np.abs(w)))


def _words_per_row(cols):
    return (cols + 63) // 64


@dataclass(frozen=True)
class BitMatrix:
    bits: np.ndarray  # (rows, words_per_row) uint64
    rows: int
    logical_cols: int

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype="<u8")
        if bits.shape != (self.rows, _words_per_row(self.logical_cols)):
            raise ShapeError(
                f"bit array shape {bits.shape} does not match "
                f"{self.rows}x{self.logical_cols}"
            )
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def words_per_row(self):
        return self.bits.shape[1]

    @property
    def shape(self):
        return (self.rows, self.logical_cols)

    def pad_mask(self):
        """Per-word mask of the logical (non-pad) bits, shape ``(words_per_row,)``."""
        mask = np.full(self.words_per_row, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
        tail = self.logical_cols % 64
        if tail:
            mask[-1] = np.uint64((1 << tail) - 1)
        return mask

    def check_pads(self):
        if np.any(self.bits & ~self.pad_mask()):
            raise IntegrityError("BitMatrix has nonzero pad bits")
        return self

    def row(self, r):
        return BitMatrix(self.bits[r : r + 1], 1, self.logical_cols)

    def __eq__(self, other):
        if not isinstance(other, BitMatrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.bits, other.bits)

    __hash__ = None


def pack(pm1):
    """Pack a ±1 (or any real; ``>= 0`` means +1) array into a :class:`BitMatrix`."""
    m = np.asarray(pm1)
    if m.ndim != 2:
        raise ShapeError(f"pack expects a 2-D array, got shape {m.shape}")
    rows, cols = m.shape
    wpr = _words_per_row(cols)
    flags = np.zeros((rows, wpr * 64), dtype=np.uint8)
    flags[:, :cols] = m >= 0
    packed = np.packbits(flags, axis=1, bitorder="little")
    words = packed.view("<u8").reshape(rows, wpr)
    return BitMatrix(words, rows, cols)


def unpack(b):
    """Expand a :class:`BitMatrix` to a ±1 float32 matrix of shape ``rows x logical_cols``."""
    raw = np.ascontiguousarray(b.bits).view(np.uint8).reshape(b.rows, -1)
    flags = np.unpackbits(raw, axis=1, bitorder="little")[:, : b.logical_cols]
    return flags.astype(np.float32) * 2.0 - 1.0


def sign_binarize(m):
    return pack(as_matrix(m))


@dataclass(frozen=True)
class ScaledBinaryTensor:
    bits: BitMatrix
    alpha: np.ndarray  # (rows,) float32

    def reconstruct(self):
        return unpack(self.bits) * self.alpha[:, None]


def binarize_weights(w):
    """Per-output-row binarization: ``w[r] ~= alpha[r] * sign(w[r])``."""
    w = as_matrix(w)
    alpha = np.mean(np.abs(w.astype(np.float64)), axis=1).astype(np.float32)
    return ScaledBinaryTensor(sign_binarize(w), alpha)

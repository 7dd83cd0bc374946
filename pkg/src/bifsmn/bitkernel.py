"""Binarized GEMM over packed ±1 operands.

Both operands are stored row-major with the shared dimension along the
columns, so ``b`` is the transpose of the right-hand matrix. The integer
core is ``n - 2 * popcount(a XOR b)``; scales are applied afterwards.

Backends
--------
``reference``
    Vectorized XOR + popcount over 64-bit words.
``blocked``
    Portable model of a NEON-style micro-kernel: operands are streamed as
    16-byte vector registers, each output tile of ``tile_rows_a x
    tile_cols_b`` keeps one 8-bit accumulator per byte lane, popcounts are
    added for at most ``widen_interval`` steps, then adjacent lanes are
    added pairwise into 16-bit accumulators, which are finally reduced in
    32 bits.
``simd``
    Reserved for a native backend; not built.
"""
from dataclasses import dataclass, field

import numpy as np

from .binarize import BitMatrix, unpack
from .errors import ConfigError, ShapeError

BACKENDS = ("reference", "blocked", "simd")
REGISTER_BYTES = 16
MAX_WIDEN_INTERVAL = 16
# largest per-step popcount contribution of one byte lane
LANE_BITS = 8
ACC8_LIMIT = 128
# 16-bit lanes are flushed to 32 bits before they can wrap
_ACC16_FLUSH = 65535 // (2 * ACC8_LIMIT)


@dataclass(frozen=True)
class KernelConfig:
    tile_rows_a: int = 4
    tile_cols_b: int = 2
    widen_interval: int = 16
    backend: str = "reference"
    instrument: bool = False

    def validate(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}; choose from {BACKENDS}")
        if self.tile_rows_a < 1 or self.tile_cols_b < 1:
            raise ConfigError("tile sizes must be >= 1")
        if not 1 <= self.widen_interval <= MAX_WIDEN_INTERVAL:
            raise ConfigError(
                f"widen_interval={self.widen_interval} can overflow 8-bit accumulators "
                f"(need 1..{MAX_WIDEN_INTERVAL})"
            )
        return self


@dataclass
class KernelStats:
    """Filled by the blocked backend when ``cfg.instrument`` is set."""

    max_acc8: int = 0
    widenings: int = 0
    tiles: int = 0
    history: list = field(default_factory=list)


def _check_operands(a, b):
    if a.logical_cols != b.logical_cols:
        raise ShapeError(
            f"inner dimensions differ: {a.logical_cols} vs {b.logical_cols}"
        )
    a.check_pads()
    b.check_pads()


def packed_dot(a_row, b_row):
    """Dot product of two packed ±1 vectors (1-row BitMatrix each)."""
    if a_row.rows != 1 or b_row.rows != 1:
        raise ShapeError("packed_dot expects single-row operands")
    _check_operands(a_row, b_row)
    diff = int(np.bitwise_count(a_row.bits ^ b_row.bits).sum())
    return a_row.logical_cols - 2 * diff


def _core_reference(a, b):
    n = a.logical_cols
    out = np.empty((a.rows, b.rows), dtype=np.int32)
    # chunk over rows of a to bound the temporary at ~32 MB
    step = max(1, (1 << 22) // max(1, b.rows * a.words_per_row))
    for i in range(0, a.rows, step):
        x = a.bits[i : i + step, None, :] ^ b.bits[None, :, :]
        out[i : i + step] = n - 2 * np.bitwise_count(x).sum(axis=2, dtype=np.int32)
    return out


def _as_registers(m):
    """View packed rows as ``(rows, steps, REGISTER_BYTES)`` uint8, zero-padded."""
    raw = np.ascontiguousarray(m.bits).view(np.uint8).reshape(m.rows, -1)
    nbytes = raw.shape[1]
    steps = max(1, -(-nbytes // REGISTER_BYTES))
    regs = np.zeros((m.rows, steps * REGISTER_BYTES), dtype=np.uint8)
    regs[:, :nbytes] = raw
    return regs.reshape(m.rows, steps, REGISTER_BYTES)


def _pad_rows(x, multiple):
    extra = (-x.shape[0]) % multiple
    if extra:
        x = np.concatenate([x, np.zeros((extra,) + x.shape[1:], dtype=x.dtype)])
    return x


def _core_blocked(a, b, cfg, stats):
    n = a.logical_cols
    ra, cb = cfg.tile_rows_a, cfg.tile_cols_b
    A = _pad_rows(_as_registers(a), ra)
    B = _pad_rows(_as_registers(b), cb)
    steps = A.shape[1]
    # B tiles: (n_btiles, cb, steps, 16)
    Bt = B.reshape(-1, cb, steps, REGISTER_BYTES)
    out = np.empty((A.shape[0], B.shape[0]), dtype=np.int32)
    half = REGISTER_BYTES // 2
    for ti in range(0, A.shape[0], ra):
        a_tile = A[ti : ti + ra]  # (ra, steps, 16): loaded once, reused for every B tile
        acc32 = np.zeros((Bt.shape[0], ra, cb, half), dtype=np.int32)
        acc16 = np.zeros((Bt.shape[0], ra, cb, half), dtype=np.uint16)
        chunks = 0
        for s0 in range(0, steps, cfg.widen_interval):
            acc8 = np.zeros((Bt.shape[0], ra, cb, REGISTER_BYTES), dtype=np.uint8)
            for s in range(s0, min(s0 + cfg.widen_interval, steps)):
                x = a_tile[None, :, None, s, :] ^ Bt[:, None, :, s, :]
                acc8 += np.bitwise_count(x)
            if stats is not None:
                peak = int(acc8.max())
                stats.max_acc8 = max(stats.max_acc8, peak)
                stats.history.append(peak)
                stats.widenings += 1
            # pairwise widening of adjacent 8-bit lanes into 16-bit lanes
            acc16 += acc8[..., 0::2].astype(np.uint16) + acc8[..., 1::2]
            chunks += 1
            if chunks == _ACC16_FLUSH:
                acc32 += acc16
                acc16[:] = 0
                chunks = 0
        acc32 += acc16
        diff = acc32.sum(axis=3)  # (n_btiles, ra, cb)
        out[ti : ti + ra] = n - 2 * diff.transpose(1, 0, 2).reshape(ra, -1)
        if stats is not None:
            stats.tiles += Bt.shape[0]
    return out[: a.rows, : b.rows]


def bgemm_int(a, b, cfg=None, stats=None):
    """Exact integer core ``out[i, j] = sum_k a[i, k] * b[j, k]`` over ±1 expansions."""
    cfg = (cfg or KernelConfig()).validate()
    _check_operands(a, b)
    if cfg.backend == "reference":
        return _core_reference(a, b)
    if cfg.backend == "blocked":
        if cfg.instrument and stats is None:
            stats = KernelStats()
        return _core_blocked(a, b, cfg, stats if cfg.instrument else None)
    raise ConfigError("the simd backend is not built in this distribution")


def bgemm(a, b, alpha_a=None, alpha_b=None, cfg=None, stats=None):
    """Scaled binary GEMM, ``alpha_a[i] * alpha_b[j] * core[i, j]`` as float32."""
    core = bgemm_int(a, b, cfg, stats)
    out = core.astype(np.float32)
    if alpha_a is not None:
        alpha_a = np.asarray(alpha_a, dtype=np.float32)
        if alpha_a.shape != (a.rows,):
            raise ShapeError(f"alpha_a must have shape ({a.rows},)")
        out *= alpha_a[:, None]
    if alpha_b is not None:
        alpha_b = np.asarray(alpha_b, dtype=np.float32)
        if alpha_b.shape != (b.rows,):
            raise ShapeError(f"alpha_b must have shape ({b.rows},)")
        out *= alpha_b[None, :]
    return out


def bgemm_blocked(a, b, cfg=None, stats=None):
    cfg = cfg or KernelConfig(backend="blocked")
    if cfg.backend != "blocked":
        raise ConfigError("bgemm_blocked requires backend='blocked'")
    return bgemm(a, b, cfg=cfg, stats=stats)


def bgemm_naive_bits(a, b):
    """Per-bit Python loop; the slow baseline for benchmarks."""
    _check_operands(a, b)
    ua = unpack(a).astype(int).tolist()
    ub = unpack(b).astype(int).tolist()
    out = np.empty((a.rows, b.rows), dtype=np.int32)
    for i, ra in enumerate(ua):
        for j, rb in enumerate(ub):
            s = 0
            for x, y in zip(ra, rb):
                s += 1 if x == y else -1
            out[i, j] = s
    return out


def binary_ops_as_flops(n_macs):
    """FLOP-equivalents of ``n_macs`` binary MACs (64 binary MACs per FLOP)."""
    return n_macs / 64

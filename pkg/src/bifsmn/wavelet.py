"""One-level orthonormal 2-D Haar transform and high-frequency distillation.

Subband naming for a 2x2 block ``[[a, b], [c, d]]`` (rows = time):

    ll = (a + b + c + d) / 2      lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2      hh = (a - b - c + d) / 2

``ll`` is the low-frequency component; ``lh``, ``hl`` and ``hh`` together
form the high-frequency component. Odd dimensions are padded by repeating
the last row/column and cropped again on inversion.
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DegenerateError, ShapeError
from .tensor import as_matrix


@dataclass(frozen=True)
class WaveletPyramid:
    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray
    orig_rows: int
    orig_cols: int

    @property
    def high(self):
        return (self.lh, self.hl, self.hh)


@dataclass(frozen=True)
class HedConfig:
    gamma: float = 0.01
    layer_interval: int = 1
    enhance_teacher: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.layer_interval < 1:
            raise ConfigError("layer_interval must be >= 1")


def _pad_even(h):
    rows, cols = h.shape[-2:]
    pad = [(0, 0)] * (h.ndim - 2) + [(0, rows % 2), (0, cols % 2)]
    return np.pad(h, pad, mode="edge")


def _dwt(x):
    """Subbands over the last two axes of a float64 array (any leading batch axes)."""
    x = _pad_even(x)
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return (a + b + c + d) / 2, (a - b + c - d) / 2, (a + b - c - d) / 2, (a - b - c + d) / 2


def _idwt(ll, lh, hl, hh, rows, cols):
    hr, hc = ll.shape[-2:]
    x = np.empty(ll.shape[:-2] + (2 * hr, 2 * hc))
    x[..., 0::2, 0::2] = (ll + lh + hl + hh) / 2
    x[..., 0::2, 1::2] = (ll - lh + hl - hh) / 2
    x[..., 1::2, 0::2] = (ll + lh - hl - hh) / 2
    x[..., 1::2, 1::2] = (ll - lh - hl + hh) / 2
    return x[..., :rows, :cols]


def haar_dwt2(h):
    h = as_matrix(h, "h")
    if h.size == 0:
        raise ShapeError("haar_dwt2 of an empty matrix")
    bands = _dwt(h.astype(np.float64))
    ll, lh, hl, hh = (s.astype(np.float32) for s in bands)
    return WaveletPyramid(ll, lh, hl, hh, orig_rows=h.shape[0], orig_cols=h.shape[1])


def haar_idwt2(p):
    shapes = {np.shape(s) for s in (p.ll, p.lh, p.hl, p.hh)}
    if len(shapes) != 1:
        raise ShapeError(f"inconsistent subband shapes {sorted(shapes)}")
    (hr, hc), = shapes
    if hr != -(-p.orig_rows // 2) or hc != -(-p.orig_cols // 2):
        raise ShapeError("subband shape does not match the original shape")
    bands = (np.asarray(s, dtype=np.float64) for s in (p.ll, p.lh, p.hl, p.hh))
    return _idwt(*bands, p.orig_rows, p.orig_cols).astype(np.float32)


def wavelet_energy(*coeffs):
    """Sum of squared coefficients over every supplied array."""
    return float(sum(np.sum(np.square(np.asarray(c, dtype=np.float64))) for c in coeffs))


def relative_energy(p):
    """Return ``(p_high, p_low)``, the shares of high- and low-band energy."""
    e_low = wavelet_energy(p.ll)
    e_high = wavelet_energy(*p.high)
    total = e_low + e_high
    if total <= 0:
        raise DegenerateError("relative energy of an all-zero pyramid")
    return e_high / total, e_low / total


def high_component(h):
    """Reconstruct ``h`` from its detail subbands only (``ll`` zeroed)."""
    p = haar_dwt2(h)
    return haar_idwt2(
        WaveletPyramid(np.zeros_like(p.ll), p.lh, p.hl, p.hh, p.orig_rows, p.orig_cols)
    )


class Enhanced(NamedTuple):
    values: np.ndarray
    degenerate: bool


def _normalized(x):
    x = np.asarray(x, dtype=np.float64)
    s = np.std(x)
    if s <= 0:
        return None
    return x / s


def highfreq_enhance(h_t):
    """High-frequency enhanced teacher state, ``H_high / std(H_high) + H / std(H)``.

    When either term has zero variance it is dropped and ``degenerate`` is
    set; a constant ``h_t`` yields zeros.
    """
    h_t = as_matrix(h_t, "h_t")
    base = _normalized(h_t)
    high = _normalized(high_component(h_t))
    if base is None:
        return Enhanced(np.zeros_like(h_t), True)
    if high is None:
        return Enhanced(base.astype(np.float32), True)
    return Enhanced((high + base).astype(np.float32), False)


def enhance_batch(states):
    """Vectorized :func:`highfreq_enhance` over a ``(batch, T, d)`` float array."""
    x = np.asarray(states, dtype=np.float64)
    rows, cols = x.shape[-2:]
    ll, lh, hl, hh = _dwt(x)
    high = _idwt(np.zeros_like(ll), lh, hl, hh, rows, cols)
    out = np.zeros_like(x)
    s_base = x.std(axis=(-2, -1), keepdims=True)
    s_high = high.std(axis=(-2, -1), keepdims=True)
    np.divide(x, s_base, out=out, where=s_base > 0)
    out += np.divide(high, s_high, out=np.zeros_like(high), where=(s_high > 0) & (s_base > 0))
    return out


def attention_batch(states):
    """Row-wise attention maps for a ``(batch, T, d)`` array; zero states map to zero."""
    q = np.square(np.asarray(states, dtype=np.float64))
    n = np.sqrt(np.square(q).sum(axis=(-2, -1), keepdims=True))
    return np.divide(q, n, out=np.zeros_like(q), where=n > 0)


def attention_map(h):
    """Elementwise square of ``h`` divided by its L2 norm (unit-norm output)."""
    q = np.square(np.asarray(h, dtype=np.float64))
    if q.size == 0:
        raise ShapeError("attention_map of an empty matrix")
    n = np.sqrt(np.sum(q * q))
    if n == 0:
        raise DegenerateError("attention_map of an all-zero matrix")
    return q / n


def teacher_attention(teacher_states, enhance=True):
    maps = []
    for h in teacher_states:
        target = highfreq_enhance(h).values if enhance else h
        maps.append(attention_map(target))
    return maps


def distill_loss(student_states, teacher_states, enhance=True):
    """Sum over layers of ``||att(student) - att(enhanced teacher)||``.

    The lists must already be aligned by the layer mapping.
    """
    if len(student_states) != len(teacher_states):
        raise ShapeError(
            f"{len(student_states)} student states vs {len(teacher_states)} teacher states"
        )
    total = 0.0
    for s, t_map in zip(student_states, teacher_attention(teacher_states, enhance)):
        s_map = attention_map(s)
        if s_map.shape != t_map.shape:
            raise ShapeError(f"state shapes differ: {s_map.shape} vs {t_map.shape}")
        total += float(np.sqrt(np.sum((s_map - t_map) ** 2)))
    return total


def layer_mapping(n_blocks, delta):
    """1-based block indices ``{delta, 2*delta, ..., n_blocks}`` matched in distillation."""
    if delta < 1 or n_blocks % delta:
        raise ConfigError(f"delta={delta} does not divide {n_blocks}")
    return list(range(delta, n_blocks + 1, delta))

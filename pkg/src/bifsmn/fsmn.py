"""Binarized D-FSMN memory blocks, the thinnable executor and the FLOPs counter.

One block maps hidden states ``H`` (``T x d_h``) and the previous block's
memory output to the next hidden states and its own memory output::

    p      = V h_t + b
    p~_t   = sum_i a_i * p[t - i*s1] + sum_j c_j * p[t + j*s2] + p~prev_t + p_t
    h'_t   = PReLU(BN_delta(U p~_t + b'))

In the binarized block every activation entering a product is replaced by
its sign, ``V``, ``U`` and every tap vector by ``alpha * sign(w)`` with a
per-row L1-mean ``alpha``. Frames outside ``[0, T)`` contribute zero.

The thinnable executor runs only blocks ``{delta, 2*delta, ..., N}``; a
skipped block passes both its hidden state and the incoming memory output
through unchanged. The classifier averages the final hidden state over time.

Batched code paths operate on ``(batch, T, features)`` float64 arrays and
keep a cache for :func:`backward`; the single-sequence inference path for a
binarized model goes through the packed kernels in :mod:`bifsmn.bitkernel`.
"""
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .binarize import binarize_weights, sign, sign_binarize, unpack, BitMatrix
from .bitkernel import KernelConfig, bgemm
from .errors import ConfigError, ShapeError
from .tensor import as_matrix

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class BatchNorm:
    mean: np.ndarray
    var: np.ndarray
    scale: np.ndarray
    shift: np.ndarray

    @classmethod
    def identity(cls, dim):
        return cls(
            mean=np.zeros(dim, np.float32),
            var=np.full(dim, 1.0 - BN_EPS, np.float32),
            scale=np.ones(dim, np.float32),
            shift=np.zeros(dim, np.float32),
        )


@dataclass
class FsmnBlockParams:
    V: np.ndarray  # (d_p, d_h)
    b: np.ndarray  # (d_p,)
    U: np.ndarray  # (d_h, d_p)
    b2: np.ndarray  # (d_h,)
    lookback: np.ndarray  # (N1 + 1, d_p); row i multiplies p[t - i*s1]
    lookahead: np.ndarray  # (N2, d_p); row j-1 multiplies p[t + j*s2]
    prelu: np.ndarray  # (d_h,)
    bn: dict = field(default_factory=dict)  # delta -> BatchNorm
    stride_back: int = 1
    stride_ahead: int = 1

    def __post_init__(self):
        if self.stride_back < 1 or self.stride_ahead < 1:
            raise ConfigError("strides must be >= 1")
        if self.lookback.shape[0] < 1:
            raise ConfigError("lookback must hold at least the current-frame tap")

    @property
    def hidden_dim(self):
        return self.V.shape[1]

    @property
    def proj_dim(self):
        return self.V.shape[0]

    @property
    def n_back(self):
        return self.lookback.shape[0] - 1

    @property
    def n_ahead(self):
        return self.lookahead.shape[0]

    def batch_norm(self, delta):
        try:
            return self.bn[delta]
        except KeyError:
            raise ConfigError(f"block has no batch-norm set for delta={delta}") from None


@dataclass
class ForwardTrace:
    memory_outputs: list  # p~ of active blocks, in layer order
    logits: np.ndarray
    active_layers: list
    hidden: np.ndarray = None  # final hidden state before pooling
    bn_used: list = field(default_factory=list)  # (layer, delta key) pairs


def default_delta_set(n_blocks):
    """Powers of two ``1, 2, ..., N/2`` (just ``[1]`` for a single block)."""
    out, d = [], 1
    while d <= max(1, n_blocks // 2):
        out.append(d)
        d *= 2
    return out


def active_layers(n_blocks, delta):
    if delta < 1 or n_blocks % delta:
        raise ConfigError(f"delta={delta} does not divide N={n_blocks}")
    return list(range(delta, n_blocks + 1, delta))


@dataclass
class ThinnableModel:
    front_W: np.ndarray  # (d_h, n_features)
    front_b: np.ndarray
    blocks: list
    cls_W: np.ndarray  # (n_classes, d_h)
    cls_b: np.ndarray
    delta_set: tuple = (1,)
    binarized: bool = True
    frames: int = 16  # nominal input length used by the FLOPs counter

    def __post_init__(self):
        self.delta_set = tuple(sorted(int(d) for d in self.delta_set))
        n = len(self.blocks)
        for d in self.delta_set:
            if n and (d < 1 or n % d):
                raise ConfigError(f"delta={d} does not divide N={n}")
        for ell, blk in enumerate(self.blocks, start=1):
            for d in self.delta_set:
                if ell % d == 0 and d not in blk.bn:
                    raise ConfigError(f"block {ell} lacks a batch-norm set for delta={d}")

    @property
    def n_blocks(self):
        return len(self.blocks)

    @property
    def n_features(self):
        return self.front_W.shape[1]

    @property
    def n_classes(self):
        return self.cls_W.shape[0]

    def check_delta(self, delta):
        if delta not in self.delta_set:
            raise ConfigError(f"delta={delta} not in the model's delta set {list(self.delta_set)}")
        return delta

    def arrays(self):
        """All arrays keyed by a stable dotted name, trainable and running stats alike."""
        out = OrderedDict(
            [("front.W", self.front_W), ("front.b", self.front_b)]
        )
        for i, blk in enumerate(self.blocks):
            for name in ("V", "b", "U", "b2", "lookback", "lookahead", "prelu"):
                out[f"blocks.{i}.{name}"] = getattr(blk, name)
            for d in sorted(blk.bn):
                for name in ("mean", "var", "scale", "shift"):
                    out[f"blocks.{i}.bn.{d}.{name}"] = getattr(blk.bn[d], name)
        out["cls.W"] = self.cls_W
        out["cls.b"] = self.cls_b
        return out

    def parameters(self):
        return OrderedDict(
            (k, v) for k, v in self.arrays().items() if not k.endswith((".mean", ".var"))
        )

    def copy(self):
        return _rebuild(self, lambda a: a.copy())

    def astype(self, dtype):
        return _rebuild(self, lambda a: a.astype(dtype))

    def forward(self, x, delta, kernel="bgemm", kernel_config=None):
        """Inference on one ``T x n_features`` sequence (running batch-norm statistics)."""
        x = as_matrix(x, "x")
        if x.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features, got {x.shape[1]}")
        self.check_delta(delta)
        if self.binarized and kernel == "bgemm":
            return _forward_packed(self, x, delta, kernel_config)
        if kernel not in ("bgemm", "emulate"):
            raise ConfigError(f"unknown kernel {kernel!r}")
        trace, _ = forward_batch(self, x[None], delta)
        trace.memory_outputs = [m[0].astype(np.float32) for m in trace.memory_outputs]
        trace.logits = trace.logits[0].astype(np.float32)
        trace.hidden = trace.hidden[0].astype(np.float32)
        return trace


def _rebuild(model, fn):
    blocks = [
        FsmnBlockParams(
            V=fn(b.V), b=fn(b.b), U=fn(b.U), b2=fn(b.b2),
            lookback=fn(b.lookback), lookahead=fn(b.lookahead), prelu=fn(b.prelu),
            bn={d: BatchNorm(fn(n.mean), fn(n.var), fn(n.scale), fn(n.shift)) for d, n in b.bn.items()},
            stride_back=b.stride_back, stride_ahead=b.stride_ahead,
        )
        for b in model.blocks
    ]
    return ThinnableModel(
        fn(model.front_W), fn(model.front_b), blocks, fn(model.cls_W), fn(model.cls_b),
        model.delta_set, model.binarized, model.frames,
    )


def init_model(
    n_features,
    n_classes,
    n_blocks=8,
    hidden_dim=64,
    proj_dim=32,
    n_back=2,
    n_ahead=1,
    stride_back=1,
    stride_ahead=1,
    delta_set=None,
    binarized=True,
    frames=16,
    seed=0,
):
    """Randomly initialized model; every array is float32."""
    rng = np.random.default_rng(seed)
    delta_set = tuple(delta_set or default_delta_set(n_blocks))

    def normal(shape, fan_in):
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)

    blocks = []
    for ell in range(1, n_blocks + 1):
        bn = {d: BatchNorm.identity(hidden_dim) for d in delta_set if ell % d == 0}
        blocks.append(
            FsmnBlockParams(
                V=normal((proj_dim, hidden_dim), hidden_dim),
                b=np.zeros(proj_dim, np.float32),
                U=normal((hidden_dim, proj_dim), proj_dim),
                b2=np.zeros(hidden_dim, np.float32),
                lookback=rng.uniform(-0.5, 0.5, (n_back + 1, proj_dim)).astype(np.float32),
                lookahead=rng.uniform(-0.5, 0.5, (n_ahead, proj_dim)).astype(np.float32),
                prelu=np.full(hidden_dim, 0.25, np.float32),
                bn=bn,
                stride_back=stride_back,
                stride_ahead=stride_ahead,
            )
        )
    return ThinnableModel(
        front_W=normal((hidden_dim, n_features), n_features),
        front_b=np.zeros(hidden_dim, np.float32),
        blocks=blocks,
        cls_W=normal((n_classes, hidden_dim), hidden_dim),
        cls_b=np.zeros(n_classes, np.float32),
        delta_set=delta_set,
        binarized=binarized,
        frames=frames,
    )


# --------------------------------------------------------------------------
# batched real-arithmetic path (training, emulation, full precision)


def shift_time(x, k):
    """``y[..., t, :] = x[..., t - k, :]`` with zeros outside the sequence."""
    y = np.zeros_like(x)
    T = x.shape[-2]
    if k >= 0:
        if k < T:
            y[..., k:, :] = x[..., : T - k, :]
    elif -k < T:
        y[..., : T + k, :] = x[..., -k:, :]
    return y


def _quantize(w):
    """``(alpha * sign(w), alpha)`` with one alpha per row; alpha is detached."""
    w = np.asarray(w, dtype=np.float64)
    alpha = np.mean(np.abs(w), axis=-1, keepdims=True) if w.size else np.zeros(w.shape[:-1] + (1,))
    return alpha * sign(w), alpha


def _tap_offsets(blk):
    back = [i * blk.stride_back for i in range(blk.n_back + 1)]
    ahead = [-j * blk.stride_ahead for j in range(1, blk.n_ahead + 1)]
    return back, ahead


def _block_forward(blk, H, skip, delta, binarized, bn_mode, update_stats):
    """One memory block on ``(B, T, d_h)``; returns ``(h_next, p_tilde, cache)``."""
    f64 = np.float64
    bn = blk.batch_norm(delta)
    if binarized:
        Hq = sign(H)
        Vq, aV = _quantize(blk.V)
        Uq, aU = _quantize(blk.U)
        Aq, aA = _quantize(blk.lookback)
        Cq, aC = _quantize(blk.lookahead)
    else:
        Hq = H
        Vq, Uq = blk.V.astype(f64), blk.U.astype(f64)
        Aq, Cq = blk.lookback.astype(f64), blk.lookahead.astype(f64)
        aV = aU = aA = aC = None
    p = Hq @ Vq.T + blk.b.astype(f64)
    Pq = sign(p) if binarized else p
    back, ahead = _tap_offsets(blk)
    shifted = [shift_time(Pq, k) for k in back + ahead]
    taps = np.concatenate([Aq, Cq], axis=0)
    pt = p.copy()
    for tap, sp in zip(taps, shifted):
        pt += tap * sp
    if skip is not None:
        pt += skip
    Ptq = sign(pt) if binarized else pt
    z = Ptq @ Uq.T + blk.b2.astype(f64)
    if bn_mode == "train":
        mu = z.mean(axis=(0, 1))
        var = z.var(axis=(0, 1))
        if update_stats:
            bn.mean[...] = BN_MOMENTUM * bn.mean + (1 - BN_MOMENTUM) * mu
            bn.var[...] = BN_MOMENTUM * bn.var + (1 - BN_MOMENTUM) * var
    else:
        mu, var = bn.mean.astype(f64), bn.var.astype(f64)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    zh = (z - mu) * inv
    y = zh * bn.scale.astype(f64) + bn.shift.astype(f64)
    slope = blk.prelu.astype(f64)
    h = np.where(y > 0, y, slope * y)
    cache = dict(
        H=H, Hq=Hq, Vq=Vq, Uq=Uq, taps=taps, aV=aV, aU=aU, aA=aA, aC=aC,
        p=p, Pq=Pq, shifted=shifted, pt=pt, Ptq=Ptq, zh=zh, inv=inv, y=y,
        has_skip=skip is not None, bn_mode=bn_mode,
    )
    return h, pt, cache


def forward_batch(model, X, delta, bn_mode="eval", update_stats=False):
    """Batched forward on ``(B, T, F)``; returns ``(trace, cache)`` in float64."""
    model.check_delta(delta)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != model.n_features:
        raise ShapeError(f"expected (batch, T, {model.n_features}) input, got {X.shape}")
    H = X @ model.front_W.T.astype(np.float64) + model.front_b
    skip = None
    memory, layers, bn_used, caches = [], [], [], []
    active = set(active_layers(model.n_blocks, delta))
    for ell, blk in enumerate(model.blocks, start=1):
        if ell not in active:
            continue
        H, skip, c = _block_forward(blk, H, skip, delta, model.binarized, bn_mode, update_stats)
        c["layer"] = ell
        caches.append(c)
        memory.append(skip)
        layers.append(ell)
        bn_used.append((ell, delta))
    pooled = H.mean(axis=1)
    logits = pooled @ model.cls_W.T.astype(np.float64) + model.cls_b
    trace = ForwardTrace(memory, logits, layers, H, bn_used)
    cache = dict(X=X, blocks=caches, H_final=H, pooled=pooled, delta=delta)
    return trace, cache


def backward(model, cache, d_logits, d_memory=None):
    """Reverse pass for :func:`forward_batch`.

    ``d_memory`` maps layer index to the gradient w.r.t. that layer's memory
    output. Returns gradients keyed like :meth:`ThinnableModel.parameters`,
    restricted to the blocks that ran.
    """
    d_memory = d_memory or {}
    delta = cache["delta"]
    grads = OrderedDict()
    pooled = cache["pooled"]
    grads["cls.W"] = d_logits.T @ pooled
    grads["cls.b"] = d_logits.sum(axis=0)
    T = cache["H_final"].shape[1]
    dH = np.repeat((d_logits @ model.cls_W.astype(np.float64))[:, None, :] / T, T, axis=1)
    d_skip = None
    for c in reversed(cache["blocks"]):
        ell = c["layer"]
        blk = model.blocks[ell - 1]
        d_pt = d_memory.get(ell)
        d_pt = np.zeros_like(c["pt"]) if d_pt is None else np.array(d_pt, dtype=np.float64)
        if d_skip is not None:
            d_pt += d_skip
        dH, d_skip, g = _block_backward(blk, c, dH, d_pt, delta, model.binarized)
        for k, v in g.items():
            grads[f"blocks.{ell - 1}.{k}"] = v
    X = cache["X"]
    grads["front.W"] = np.einsum("btd,btf->df", dH, X)
    grads["front.b"] = dH.sum(axis=(0, 1))
    return grads


def _ste(x, g):
    return np.where(np.abs(x) <= 1.0, g, 0.0)


def _block_backward(blk, c, dh, d_pt, delta, binarized):
    g = {}
    bn = blk.batch_norm(delta)
    y, zh, inv = c["y"], c["zh"], c["inv"]
    slope = blk.prelu.astype(np.float64)
    g["prelu"] = np.sum(dh * np.where(y > 0, 0.0, y), axis=(0, 1))
    dy = dh * np.where(y > 0, 1.0, slope)
    g[f"bn.{delta}.scale"] = np.sum(dy * zh, axis=(0, 1))
    g[f"bn.{delta}.shift"] = np.sum(dy, axis=(0, 1))
    dzh = dy * bn.scale.astype(np.float64)
    if c["bn_mode"] == "train":
        n = zh.shape[0] * zh.shape[1]
        dz = inv / n * (
            n * dzh - dzh.sum(axis=(0, 1)) - zh * np.sum(dzh * zh, axis=(0, 1))
        )
    else:
        dz = dzh * inv
    g["b2"] = dz.sum(axis=(0, 1))
    dUq = np.einsum("bti,btj->ij", dz, c["Ptq"])
    dPtq = dz @ c["Uq"]
    d_pt = d_pt + (_ste(c["pt"], dPtq) if binarized else dPtq)
    d_skip = d_pt if c["has_skip"] else None
    back, ahead = _tap_offsets(blk)
    offsets = back + ahead
    taps = c["taps"]
    d_taps = np.empty_like(taps)
    dPq = np.zeros_like(c["Pq"])
    for i, (k, sp) in enumerate(zip(offsets, c["shifted"])):
        d_taps[i] = np.sum(d_pt * sp, axis=(0, 1))
        dPq += shift_time(d_pt * taps[i], -k)
    dp = d_pt + (_ste(c["p"], dPq) if binarized else dPq)
    g["b"] = dp.sum(axis=(0, 1))
    dVq = np.einsum("bti,btj->ij", dp, c["Hq"])
    dHq = dp @ c["Vq"]
    dH = _ste(c["H"], dHq) if binarized else dHq
    n_back = blk.n_back + 1
    dA, dC = d_taps[:n_back], d_taps[n_back:]
    if binarized:
        # alpha is treated as a constant; sign passes gradient only where |w| <= 1
        dVq = _ste(blk.V, dVq * c["aV"])
        dUq = _ste(blk.U, dUq * c["aU"])
        dA = _ste(blk.lookback, dA * c["aA"])
        dC = _ste(blk.lookahead, dC * c["aC"])
    g["V"], g["U"], g["lookback"], g["lookahead"] = dVq, dUq, dA, dC
    return dH, d_skip, g


# --------------------------------------------------------------------------
# single-sequence reference blocks


def memory_block_forward_fp(H, params, skip=None):
    """Full-precision memory output ``p~`` (``T x d_p``) for one sequence."""
    H = as_matrix(H, "H")
    if H.shape[1] != params.hidden_dim:
        raise ShapeError(f"H has {H.shape[1]} features, block expects {params.hidden_dim}")
    p = H.astype(np.float64) @ params.V.T.astype(np.float64) + params.b
    back, ahead = _tap_offsets(params)
    taps = np.concatenate([params.lookback, params.lookahead]).astype(np.float64)
    pt = p.copy()
    for tap, k in zip(taps, back + ahead):
        pt += tap * shift_time(p, k)
    if skip is not None:
        pt += _check_skip(skip, pt.shape)
    return pt.astype(np.float32)


def _check_skip(skip, shape):
    skip = np.asarray(skip, dtype=np.float64)
    if skip.shape != shape:
        raise ShapeError(f"skip input has shape {skip.shape}, expected {shape}")
    return skip


def _xnor_rows(a_bits, tap_row_bits, mask):
    return ~(a_bits ^ tap_row_bits) & mask


def _memory_packed(H, params, skip, cfg):
    """Packed-kernel memory path; returns ``(p, p~)`` in float32."""
    Vb = binarize_weights(params.V)
    Hb = sign_binarize(H)
    p = bgemm(Hb, Vb.bits, None, Vb.alpha, cfg) + params.b
    Pb = sign_binarize(p)
    taps = binarize_weights(np.concatenate([params.lookback, params.lookahead]))
    back, ahead = _tap_offsets(params)
    mask = Pb.pad_mask()
    T = H.shape[0]
    pt = p.astype(np.float64)
    for i, k in enumerate(back + ahead):
        prod = unpack(BitMatrix(_xnor_rows(Pb.bits, taps.bits.bits[i], mask), T, Pb.logical_cols))
        pt += np.float64(taps.alpha[i]) * shift_time(prod.astype(np.float64), k)
    if skip is not None:
        pt += _check_skip(skip, pt.shape)
    return p, pt.astype(np.float32)


def memory_block_forward_bin(H, params, delta, skip=None, kernel_config=None):
    """Binarized memory output via packed XNOR/popcount kernels."""
    H = as_matrix(H, "H")
    if H.shape[1] != params.hidden_dim:
        raise ShapeError(f"H has {H.shape[1]} features, block expects {params.hidden_dim}")
    params.batch_norm(delta)
    return _memory_packed(H, params, skip, kernel_config)[1]


def _transform_packed(pt, params, delta, cfg):
    bn = params.batch_norm(delta)
    Ub = binarize_weights(params.U)
    z = bgemm(sign_binarize(pt), Ub.bits, None, Ub.alpha, cfg) + params.b2
    y = (z - bn.mean) / np.sqrt(bn.var + np.float32(BN_EPS)) * bn.scale + bn.shift
    return np.where(y > 0, y, params.prelu * y).astype(np.float32)


def block_forward_bin(H, params, delta, skip=None, kernel_config=None):
    """Binarized block on one sequence: ``(h_next, p_tilde)``."""
    pt = memory_block_forward_bin(H, params, delta, skip, kernel_config)
    return _transform_packed(pt, params, delta, kernel_config), pt


def _forward_packed(model, x, delta, cfg):
    H = x @ model.front_W.T + model.front_b
    skip = None
    memory, layers, bn_used = [], [], []
    for ell in active_layers(model.n_blocks, delta):
        blk = model.blocks[ell - 1]
        H, skip = block_forward_bin(H, blk, delta, skip, cfg)
        memory.append(skip)
        layers.append(ell)
        bn_used.append((ell, delta))
    logits = H.mean(axis=0) @ model.cls_W.T + model.cls_b
    return ForwardTrace(memory, logits.astype(np.float32), layers, H, bn_used)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# FLOPs


def _block_cost(blk, frames, binarized):
    """``(binary_macs, real_ops)`` of one block for ``frames`` input frames."""
    dh, dp = blk.hidden_dim, blk.proj_dim
    k = blk.n_back + 1 + blk.n_ahead
    matmul_macs = frames * (dh * dp + dp * dh)
    tap_macs = frames * dp * k
    # bias adds, skip add, residual p add, BN scale+shift, PReLU
    common = frames * (dp + dh + dp + dp + 2 * dh + dh)
    if binarized:
        # alpha on the projection, transform and each tap product, plus tap sums
        scaling = frames * (dp + dh + dp * k)
        return matmul_macs + tap_macs, common + scaling + frames * dp * k
    # real taps: multiply and accumulate counted separately
    return 0, matmul_macs + tap_macs + frames * dp * k + common


def count_flops(model, delta, frames=None, binarized=None):
    """FLOP-equivalents of one forward pass at depth ``delta``.

    Real multiply-accumulates count as one FLOP, binary ones as 1/64, and
    elementwise real operations (scaling, biases, batch norm, PReLU, skip
    adds, pooling) one each. Returns an exact float.
    """
    model.check_delta(delta)
    frames = model.frames if frames is None else frames
    binarized = model.binarized if binarized is None else binarized
    dh = model.front_W.shape[0]
    total = Fraction(frames * (model.n_features * dh + dh))
    total += frames * dh + model.n_classes * dh + model.n_classes
    for ell in active_layers(model.n_blocks, delta):
        bin_macs, real = _block_cost(model.blocks[ell - 1], frames, binarized)
        total += Fraction(bin_macs, 64) + real
    return float(total)


def count_backbone_flops(model, delta, frames=None, binarized=None):
    frames = model.frames if frames is None else frames
    binarized = model.binarized if binarized is None else binarized
    total = Fraction(0)
    for ell in active_layers(model.n_blocks, delta):
        bin_macs, real = _block_cost(model.blocks[ell - 1], frames, binarized)
        total += Fraction(bin_macs, 64) + real
    return float(total)

"""Network building blocks: no-norm convolution blocks, residual blocks,
shifted-window attention, and the appearance-enhanced axis-wise learning
(AE + axis-attention + FFN) machinery.

All blocks are pure functions of (input, params); parameter containers are
plain dataclasses of Tensors so a generic walker can name and collect them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) with samples clipped to +-2 std."""
    v = rng.standard_normal(shape) * std
    return np.clip(v, -2 * std, 2 * std).astype(dtype)


def kaiming(rng, shape, dtype=np.float32):
    """He initialization for conv weights (O, C, kh, kw)."""
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


def _param(data):
    return Tensor(data, requires_grad=True)


def _zeros(shape, dtype):
    return _param(np.zeros(shape, dtype=dtype))


def _ones(shape, dtype):
    return _param(np.ones(shape, dtype=dtype))


# --------------------------------------------------------------------------
# parameter walking
# --------------------------------------------------------------------------

def iter_named(obj, prefix=""):
    """Yield (name, Tensor) pairs from nested dataclasses / lists / dicts."""
    if obj is None:
        return
    if isinstance(obj, Tensor):
        yield prefix, obj
        return
    if is_dataclass(obj):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (Tensor, list, tuple, dict)) or is_dataclass(v):
                sub = f"{prefix}.{f.name}" if prefix else f.name
                yield from iter_named(v, sub)
        return
    if isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from iter_named(v, f"{prefix}.{i}" if prefix else str(i))
        return
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from iter_named(v, f"{prefix}.{k}" if prefix else str(k))


# --------------------------------------------------------------------------
# conv / residual blocks (no normalization, PReLU)
# --------------------------------------------------------------------------

@dataclass
class ConvBlockParams:
    """Two conv+PReLU units; the first conv carries the stride. No
    normalization parameters exist here by design."""
    w1: Tensor
    b1: Tensor
    s1: Tensor   # prelu slope, per channel
    w2: Tensor
    b2: Tensor
    s2: Tensor
    stride: int = 1


def make_conv_block(rng, cin, cout, stride=1, k=3, k2=None, dtype=np.float32):
    k2 = k if k2 is None else k2
    return ConvBlockParams(
        w1=_param(kaiming(rng, (cout, cin, k, k), dtype)),
        b1=_zeros((cout,), dtype),
        s1=_param(np.full((cout,), 0.25, dtype=dtype)),
        w2=_param(kaiming(rng, (cout, cout, k2, k2), dtype)),
        b2=_zeros((cout,), dtype),
        s2=_param(np.full((cout,), 0.25, dtype=dtype)),
        stride=stride,
    )


def conv_block(x, p: ConvBlockParams):
    k1 = p.w1.shape[2]
    k2 = p.w2.shape[2]
    h = ad.conv2d(x, p.w1, p.b1, stride=p.stride, pad=k1 // 2)
    h = ad.prelu(h, p.s1)
    h = ad.conv2d(h, p.w2, p.b2, stride=1, pad=k2 // 2)
    return ad.prelu(h, p.s2)


@dataclass
class ResidualBlockParams:
    w1: Tensor
    b1: Tensor
    s1: Tensor
    w2: Tensor
    b2: Tensor
    proj_w: Optional[Tensor] = None  # 1x1 projection when cin != cout


def make_residual_block(rng, cin, cout=None, dtype=np.float32):
    cout = cin if cout is None else cout
    proj = None if cin == cout else _param(kaiming(rng, (cout, cin, 1, 1), dtype))
    return ResidualBlockParams(
        w1=_param(kaiming(rng, (cout, cin, 3, 3), dtype)),
        b1=_zeros((cout,), dtype),
        s1=_param(np.full((cout,), 0.25, dtype=dtype)),
        w2=_param(kaiming(rng, (cout, cout, 3, 3), dtype)),
        b2=_zeros((cout,), dtype),
        proj_w=proj,
    )


def residual_block(x, p: ResidualBlockParams):
    h = ad.prelu(ad.conv2d(x, p.w1, p.b1, pad=1), p.s1)
    h = ad.conv2d(h, p.w2, p.b2, pad=1)
    skip = x if p.proj_w is None else ad.conv2d(x, p.proj_w)
    return ad.add(skip, h)


# --------------------------------------------------------------------------
# windowed attention (Swin-style)
# --------------------------------------------------------------------------

def relative_position_index(window):
    """(T, T) index into the (2w-1)^2 relative-position bias table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window),
                                  indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]       # 2, T, T
    rel = rel.transpose(1, 2, 0) + (window - 1)
    return rel[:, :, 0] * (2 * window - 1) + rel[:, :, 1]


def shift_attention_mask(H, W, window, shift, dtype=np.float32):
    """Additive mask (nW, T, T), -1e9 on pairs crossing a cyclic-shift
    boundary, as in the standard shifted-window scheme."""
    img = np.zeros((H, W))
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            img[hs, ws] = cnt
            cnt += 1
    win = img.reshape(H // window, window, W // window, window) \
        .transpose(0, 2, 1, 3).reshape(-1, window * window)
    diff = win[:, :, None] - win[:, None, :]
    return np.where(diff != 0, -1e9, 0.0).astype(dtype)


@dataclass
class WindowAttentionParams:
    qkv_w: Tensor     # (C, 3C)
    qkv_b: Tensor
    proj_w: Tensor    # (C, C)
    proj_b: Tensor
    rel_bias: Tensor  # ((2w-1)^2, heads)
    heads: int = 1
    window: int = 4
    shift: int = 0


def make_window_attention(rng, dim, heads, window, shift=0, dtype=np.float32):
    if dim % heads:
        raise ValueError(f"dim {dim} not divisible by heads {heads}")
    return WindowAttentionParams(
        qkv_w=_param(trunc_normal(rng, (dim, 3 * dim), dtype=dtype)),
        qkv_b=_zeros((3 * dim,), dtype),
        proj_w=_param(trunc_normal(rng, (dim, dim), dtype=dtype)),
        proj_b=_zeros((dim,), dtype),
        rel_bias=_zeros(((2 * window - 1) ** 2, heads), dtype),
        heads=heads, window=window, shift=shift,
    )


def _mha(tokens, qkv_w, qkv_b, proj_w, proj_b, heads,
         bias=None, mask=None, n_groups=None):
    """Multi-head self-attention over (B, T, C) tokens.

    `bias` is an optional (1, heads, T, T) additive tensor; `mask` an
    optional (nW, T, T) additive array applied per group of nW windows."""
    B, T, C = tokens.shape
    d = C // heads
    qkv = ad.add(ad.matmul(tokens, qkv_w), qkv_b)
    q, k, v = ad.split(qkv, [C, C, C], axis=2)

    def heads_first(t):
        return ad.transpose(ad.reshape(t, (B, T, heads, d)), (0, 2, 1, 3))

    q, k, v = heads_first(q), heads_first(k), heads_first(v)
    attn = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    if bias is not None:
        attn = ad.add(attn, bias)
    if mask is not None:
        nW = mask.shape[0]
        attn = ad.reshape(attn, (B // nW, nW, heads, T, T))
        attn = ad.add(attn, Tensor(mask[None, :, None],
                                   dtype=tokens.dtype))
        attn = ad.reshape(attn, (B, heads, T, T))
    attn = ad.softmax(attn, axis=-1)
    out = ad.matmul(attn, v)                                # B, h, T, d
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, T, C))
    return ad.add(ad.matmul(out, proj_w), proj_b)


def window_attention(x, p: WindowAttentionParams):
    """Per-window MHA with relative-position bias on NCHW input whose
    spatial dims are multiples of the window."""
    N, C, H, W = x.shape
    w = p.window
    if H % w or W % w:
        raise ValueError("window_attention: H, W must be multiples of window")
    t = ad.transpose(x, (0, 2, 3, 1))                       # N, H, W, C
    if p.shift:
        t = ad.roll(t, (-p.shift, -p.shift), axis=(1, 2))
    nh, nw = H // w, W // w
    t = ad.reshape(t, (N, nh, w, nw, w, C))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    tokens = ad.reshape(t, (N * nh * nw, w * w, C))

    idx = relative_position_index(w)
    bias = ad.index_select(p.rel_bias, idx)                 # T, T, heads
    bias = ad.reshape(ad.transpose(bias, (2, 0, 1)),
                      (1, p.heads, w * w, w * w))
    mask = shift_attention_mask(H, W, w, p.shift,
                                dtype=x.dtype) if p.shift else None
    out = _mha(tokens, p.qkv_w, p.qkv_b, p.proj_w, p.proj_b, p.heads,
               bias=bias, mask=mask)

    out = ad.reshape(out, (N, nh, nw, w, w, C))
    out = ad.transpose(out, (0, 1, 3, 2, 4, 5))
    out = ad.reshape(out, (N, H, W, C))
    if p.shift:
        out = ad.roll(out, (p.shift, p.shift), axis=(1, 2))
    return ad.transpose(out, (0, 3, 1, 2))


@dataclass
class MlpParams:
    w1: Tensor  # 1x1 conv (hidden, C, 1, 1)
    b1: Tensor
    w2: Tensor
    b2: Tensor


def make_mlp(rng, dim, hidden=None, dtype=np.float32):
    hidden = 4 * dim if hidden is None else hidden
    return MlpParams(
        w1=_param(trunc_normal(rng, (hidden, dim, 1, 1), dtype=dtype)),
        b1=_zeros((hidden,), dtype),
        w2=_param(trunc_normal(rng, (dim, hidden, 1, 1), dtype=dtype)),
        b2=_zeros((dim,), dtype),
    )


def mlp(x, p: MlpParams):
    return ad.conv2d(ad.gelu(ad.conv2d(x, p.w1, p.b1)), p.w2, p.b2)


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor


def make_norm(dim, dtype=np.float32):
    return NormParams(gain=_ones((dim,), dtype), bias=_zeros((dim,), dtype))


def channel_norm(x, p: NormParams):
    return ad.layer_norm(x, p.gain, p.bias, axis=1)


@dataclass
class SwinBlockParams:
    norm1: NormParams
    attn: WindowAttentionParams
    norm2: NormParams
    ffn: MlpParams


def make_swin_block(rng, dim, heads, window, shift=0, dtype=np.float32):
    return SwinBlockParams(
        norm1=make_norm(dim, dtype),
        attn=make_window_attention(rng, dim, heads, window, shift, dtype),
        norm2=make_norm(dim, dtype),
        ffn=make_mlp(rng, dim, dtype=dtype),
    )


def _pad_to_multiple(x, m):
    """Zero-pad spatial dims up to the next multiple of m; returns
    (padded, (H, W)) for cropping back."""
    N, C, H, W = x.shape
    ph = (-H) % m
    pw = (-W) % m
    if ph or pw:
        x = ad.pad_zero(x, (0, ph, 0, pw))
    return x, (H, W)


def _crop_back(x, hw):
    H, W = hw
    if x.shape[2] == H and x.shape[3] == W:
        return x
    return ad.crop(x, (slice(None), slice(None), slice(0, H), slice(0, W)))


def swin_block(x, p: SwinBlockParams):
    """Pre-norm windowed-attention block; pads spatial dims to the window
    internally and crops back."""
    xp, hw = _pad_to_multiple(x, p.attn.window)
    h = ad.add(xp, window_attention(channel_norm(xp, p.norm1), p.attn))
    h = ad.add(h, mlp(channel_norm(h, p.norm2), p.ffn))
    return _crop_back(h, hw)


@dataclass
class PatchMergeParams:
    norm: NormParams
    w: Tensor  # 1x1 conv (2C, 4C, 1, 1)


def make_patch_merge(rng, dim, dtype=np.float32):
    return PatchMergeParams(
        norm=make_norm(4 * dim, dtype),
        w=_param(trunc_normal(rng, (2 * dim, 4 * dim, 1, 1), dtype=dtype)),
    )


def patch_merge(x, p: PatchMergeParams):
    """2x2 spatial gather + linear reduction, halving resolution and
    doubling channels."""
    xp, _ = _pad_to_multiple(x, 2)
    parts = [ad.crop(xp, (slice(None), slice(None),
                          slice(i, None, 2), slice(j, None, 2)))
             for i in (0, 1) for j in (0, 1)]
    cat = ad.concat(parts, axis=1)
    return ad.conv2d(channel_norm(cat, p.norm), p.w)


# --------------------------------------------------------------------------
# appearance-enhanced axis-wise learning
# --------------------------------------------------------------------------

@dataclass
class AEBlockParams:
    """Residual appearance-fusion branch: 1x1 conv -> residual block ->
    1x1 conv, added back onto the context feature."""
    conv_in_w: Tensor
    conv_in_b: Tensor
    res: ResidualBlockParams
    conv_out_w: Tensor
    conv_out_b: Tensor


def make_ae_block(rng, c_ctx, c_app, mid=None, dtype=np.float32):
    mid = c_ctx if mid is None else mid
    return AEBlockParams(
        conv_in_w=_param(kaiming(rng, (mid, c_ctx + c_app, 1, 1), dtype)),
        conv_in_b=_zeros((mid,), dtype),
        res=make_residual_block(rng, mid, dtype=dtype),
        conv_out_w=_param(kaiming(rng, (c_ctx, mid, 1, 1), dtype)),
        conv_out_b=_zeros((c_ctx,), dtype),
    )


def ae_block(f_c, f_a, p: AEBlockParams):
    if f_c.shape[2:] != f_a.shape[2:]:
        raise ValueError("ae_block: spatial dims of context and appearance "
                         "features differ")
    h = ad.conv2d(ad.concat([f_c, f_a], axis=1), p.conv_in_w, p.conv_in_b)
    h = residual_block(h, p.res)
    h = ad.conv2d(h, p.conv_out_w, p.conv_out_b)
    return ad.add(f_c, h)


def axis_split(x, band):
    """Pad spatial dims to multiples of `band`, halve channels, and cut the
    first half into horizontal bands (band x full width) and the second
    half into vertical bands (full height x band).

    Returns (x_bands, y_bands, record); x_bands is (N*nbx, band*Wp, C/2)
    tokens, y_bands is (N*nby, Hp*band, C/2)."""
    N, C, H, W = x.shape
    if C % 2:
        raise ValueError("axis_split: odd channel count")
    xp, hw = _pad_to_multiple(x, band)
    Hp, Wp = xp.shape[2], xp.shape[3]
    fx, fy = ad.split(xp, [C // 2, C // 2], axis=1)

    nbx = Hp // band
    tx = ad.transpose(fx, (0, 2, 3, 1))                    # N, Hp, Wp, C2
    tx = ad.reshape(tx, (N * nbx, band * Wp, C // 2))

    nby = Wp // band
    ty = ad.transpose(fy, (0, 3, 2, 1))                    # N, Wp, Hp, C2
    ty = ad.reshape(ty, (N * nby, band * Hp, C // 2))

    record = (N, C, Hp, Wp, band, hw)
    return tx, ty, record


def axis_assemble(tx, ty, record):
    """Inverse of axis_split: rebuild NCHW and crop the padding."""
    N, C, Hp, Wp, band, hw = record
    fx = ad.reshape(tx, (N, Hp, Wp, C // 2))
    fx = ad.transpose(fx, (0, 3, 1, 2))
    fy = ad.reshape(ty, (N, Wp, Hp, C // 2))
    fy = ad.transpose(fy, (0, 3, 2, 1))
    return _crop_back(ad.concat([fx, fy], axis=1), hw)


@dataclass
class AxisAttentionParams:
    """Per-branch MHA projections for row-band and column-band attention.
    No positional bias: tokens inside a band are treated as a set."""
    x_qkv_w: Tensor
    x_qkv_b: Tensor
    x_proj_w: Tensor
    x_proj_b: Tensor
    y_qkv_w: Tensor
    y_qkv_b: Tensor
    y_proj_w: Tensor
    y_proj_b: Tensor
    heads: int = 4
    band: int = 4


def make_axis_attention(rng, dim, heads, band, dtype=np.float32):
    c2 = dim // 2
    if c2 % heads:
        raise ValueError(f"branch dim {c2} not divisible by heads {heads}")
    def proj(shape):
        return _param(trunc_normal(rng, shape, dtype=dtype))
    return AxisAttentionParams(
        x_qkv_w=proj((c2, 3 * c2)), x_qkv_b=_zeros((3 * c2,), dtype),
        x_proj_w=proj((c2, c2)), x_proj_b=_zeros((c2,), dtype),
        y_qkv_w=proj((c2, 3 * c2)), y_qkv_b=_zeros((3 * c2,), dtype),
        y_proj_w=proj((c2, c2)), y_proj_b=_zeros((c2,), dtype),
        heads=heads, band=band,
    )


def axis_attention(x, p: AxisAttentionParams):
    """Axis-wise attention: MHA within horizontal bands on one channel half
    and vertical bands on the other, reassembled to the input shape."""
    tx, ty, record = axis_split(x, p.band)
    ox = _mha(tx, p.x_qkv_w, p.x_qkv_b, p.x_proj_w, p.x_proj_b, p.heads)
    oy = _mha(ty, p.y_qkv_w, p.y_qkv_b, p.y_proj_w, p.y_proj_b, p.heads)
    return axis_assemble(ox, oy, record)


@dataclass
class AEALBlockParams:
    ae: AEBlockParams
    norm1: NormParams
    attn: AxisAttentionParams
    norm2: NormParams
    ffn: MlpParams


def make_aeal_block(rng, c_ctx, c_app, heads, band, dtype=np.float32):
    return AEALBlockParams(
        ae=make_ae_block(rng, c_ctx, c_app, dtype=dtype),
        norm1=make_norm(c_ctx, dtype),
        attn=make_axis_attention(rng, c_ctx, heads, band, dtype),
        norm2=make_norm(c_ctx, dtype),
        ffn=make_mlp(rng, c_ctx, dtype=dtype),
    )


def aeal_block(f_c, f_a, p: AEALBlockParams):
    """Appearance fusion, then pre-norm axis attention and FFN with
    residual connections. Output feeds the next block as its context."""
    f_ac = ae_block(f_c, f_a, p.ae)
    h = ad.add(f_ac, axis_attention(channel_norm(f_ac, p.norm1), p.attn))
    return ad.add(h, mlp(channel_norm(h, p.norm2), p.ffn))


def zero_params(obj, names=None):
    """Zero the data of every tensor under obj (optionally filtered by
    substring match on the walked name). Used by residual-identity tests."""
    for name, t in iter_named(obj):
        if names is None or any(s in name for s in names):
            t.data[...] = 0.0

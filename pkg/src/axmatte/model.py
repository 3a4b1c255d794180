"""Full matting network: convolution stem, windowed-attention stages,
axis-wise learning stack, and transformer decoder with detail fusion.

Input is a 6-channel map (RGB image + one-hot trimap); output is an alpha
matte clipped to [0, 1] at the input resolution.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .autodiff import Parameter, Tensor


@dataclass
class ModelConfig:
    stem_channels: Tuple[int, int] = (16, 32)
    stage_channels: Tuple[int, ...] = (32, 64, 128, 256)
    depths: Tuple[int, ...] = (2, 2, 2, 2)
    window: int = 4
    aeal_count: int = 3
    aeal_dim: int = 128
    aeal_band: int = 4
    aeal_heads: int = 4
    decoder_depth: int = 1
    in_channels: int = 6
    # kernel size used by every second convolution of the stem and
    # detail-fusion blocks (the kernel-size study sweeps this)
    alt_kernel: int = 3
    # decoder widths at 1/32, 1/16, 1/8, 1/4; derived from the last stage
    # when not given
    decoder_dims: Optional[Tuple[int, ...]] = None

    def decoder_ladder(self):
        if self.decoder_dims is not None:
            return list(self.decoder_dims)
        top = self.stage_channels[3]
        return [max(top // (2 ** i), 16) for i in range(4)]

    def __post_init__(self):
        for a, b in zip(self.stage_channels, self.stage_channels[1:]):
            if b != 2 * a:
                raise ValueError("stage channels must double per stage")
        if self.aeal_count < 1:
            raise ValueError("need at least one axis-wise learning block")

    def stage_heads(self, i):
        return max(1, self.stage_channels[i] // 32)


def tiny_config():
    """Reduced config for gradient checks and fast tests."""
    return ModelConfig(stem_channels=(4, 8), stage_channels=(8, 16, 32, 64),
                       depths=(1, 1, 1, 1), window=2, aeal_count=1,
                       aeal_dim=16, aeal_band=2, aeal_heads=2)


def overfit_config():
    """Small config (< 1M parameters) for the overfit smoke test."""
    return ModelConfig(stem_channels=(8, 16), stage_channels=(16, 32, 64, 128),
                       depths=(1, 1, 1, 1), window=4, aeal_count=1,
                       aeal_dim=64, aeal_band=4, aeal_heads=2,
                       decoder_dims=(64, 32, 16, 16))


@dataclass
class EncoderFeatures:
    d1: Tensor   # stem, full resolution
    d2: Tensor   # stem, 1/2
    f1: Tensor   # 1/4
    f2: Tensor   # 1/8
    f3: Tensor   # 1/16
    f4: Tensor   # 1/32


@dataclass
class EncoderWeights:
    stem1: ly.ConvBlockParams
    stem2: ly.ConvBlockParams
    patchify_w: Tensor
    patchify_b: Tensor
    stages: List[List[ly.SwinBlockParams]]
    merges: List[ly.PatchMergeParams]


@dataclass
class AealStackWeights:
    # context path: F4 -> 1x1 conv down to the compact dim -> residual block
    ctx_proj_w: Tensor
    ctx_proj_b: Tensor
    ctx_res: ly.ResidualBlockParams
    # appearance path: cat(up(F4), F3) -> conv -> residual -> stride-2 conv
    app_in_w: Tensor
    app_in_b: Tensor
    app_in_s: Tensor
    app_res: ly.ResidualBlockParams
    app_down_w: Tensor
    app_down_b: Tensor
    blocks: List[ly.AEALBlockParams]


@dataclass
class DecoderWeights:
    fuse_w: List[Tensor]          # 1x1 projections after each concat
    fuse_b: List[Tensor]
    swins: List[List[ly.SwinBlockParams]]
    detail1: ly.ConvBlockParams   # after concat with d2, at 1/2
    detail2: ly.ConvBlockParams   # after concat with d1, full res
    head_w: Tensor
    head_b: Tensor


@dataclass
class ModelWeights:
    config: ModelConfig
    encoder: EncoderWeights
    aeal: AealStackWeights
    decoder: DecoderWeights

    def named_parameters(self) -> List[Parameter]:
        out = []
        for group, obj in (("encoder", self.encoder), ("aeal", self.aeal),
                           ("decoder", self.decoder)):
            for name, t in ly.iter_named(obj, group):
                out.append(Parameter(name=name, tensor=t))
        names = [p.name for p in out]
        assert len(names) == len(set(names))
        return out

    def tensors(self) -> Dict[str, Tensor]:
        return {p.name: p.tensor for p in self.named_parameters()}


def build_weights(cfg: ModelConfig, seed=0, dtype=np.float32) -> ModelWeights:
    rng = np.random.default_rng(seed)
    sc = cfg.stage_channels
    st1, st2 = cfg.stem_channels

    enc = EncoderWeights(
        stem1=ly.make_conv_block(rng, cfg.in_channels, st1, stride=1,
                                 k2=cfg.alt_kernel, dtype=dtype),
        stem2=ly.make_conv_block(rng, st1, st2, stride=2,
                                 k2=cfg.alt_kernel, dtype=dtype),
        patchify_w=Tensor(ly.kaiming(rng, (sc[0], st2, 3, 3), dtype),
                          requires_grad=True),
        patchify_b=Tensor(np.zeros(sc[0], dtype=dtype), requires_grad=True),
        stages=[], merges=[],
    )
    for i, c in enumerate(sc):
        blocks = []
        for j in range(cfg.depths[i]):
            shift = 0 if j % 2 == 0 else cfg.window // 2
            blocks.append(ly.make_swin_block(rng, c, cfg.stage_heads(i),
                                             cfg.window, shift, dtype))
        enc.stages.append(blocks)
        if i + 1 < len(sc):
            enc.merges.append(ly.make_patch_merge(rng, c, dtype))

    c3, c4 = sc[2], sc[3]
    ca = cfg.aeal_dim
    aeal = AealStackWeights(
        ctx_proj_w=Tensor(ly.kaiming(rng, (ca, c4, 1, 1), dtype),
                          requires_grad=True),
        ctx_proj_b=Tensor(np.zeros(ca, dtype=dtype), requires_grad=True),
        ctx_res=ly.make_residual_block(rng, ca, dtype=dtype),
        app_in_w=Tensor(ly.kaiming(rng, (ca, c3 + c4, 3, 3), dtype),
                        requires_grad=True),
        app_in_b=Tensor(np.zeros(ca, dtype=dtype), requires_grad=True),
        app_in_s=Tensor(np.full(ca, 0.25, dtype=dtype), requires_grad=True),
        app_res=ly.make_residual_block(rng, ca, dtype=dtype),
        app_down_w=Tensor(ly.kaiming(rng, (ca, ca, 3, 3), dtype),
                          requires_grad=True),
        app_down_b=Tensor(np.zeros(ca, dtype=dtype), requires_grad=True),
        blocks=[ly.make_aeal_block(rng, ca, ca, cfg.aeal_heads,
                                   cfg.aeal_band, dtype)
                for _ in range(cfg.aeal_count)],
    )

    # decoder channel ladder: one entry per swin level (1/32 .. 1/4)
    dch = cfg.decoder_ladder()
    cat_in = [ca + sc[3], dch[0] + sc[2], dch[1] + sc[1], dch[2] + sc[0]]
    dec = DecoderWeights(
        fuse_w=[Tensor(ly.kaiming(rng, (dch[i], cat_in[i], 1, 1), dtype),
                       requires_grad=True) for i in range(4)],
        fuse_b=[Tensor(np.zeros(dch[i], dtype=dtype), requires_grad=True)
                for i in range(4)],
        swins=[[ly.make_swin_block(rng, dch[i], max(1, dch[i] // 32),
                                   cfg.window,
                                   0 if j % 2 == 0 else cfg.window // 2,
                                   dtype)
                for j in range(cfg.decoder_depth)] for i in range(4)],
        detail1=ly.make_conv_block(rng, dch[3] + st2, st2,
                                   k2=cfg.alt_kernel, dtype=dtype),
        detail2=ly.make_conv_block(rng, st2 + st1, st1,
                                   k2=cfg.alt_kernel, dtype=dtype),
        # small weights and a mid-range bias keep the initial prediction
        # inside (0, 1), away from the flat regions of the output clip
        head_w=Tensor(ly.trunc_normal(rng, (1, st1, 3, 3), std=0.01,
                                      dtype=dtype), requires_grad=True),
        head_b=Tensor(np.full(1, 0.5, dtype=dtype), requires_grad=True),
    )
    return ModelWeights(config=cfg, encoder=enc, aeal=aeal, decoder=dec)


def count_parameters(weights) -> int:
    if isinstance(weights, ModelWeights):
        params = weights.named_parameters()
    else:
        params = list(weights)
    return sum(p.tensor.size for p in params)


# --------------------------------------------------------------------------
# forward passes
# --------------------------------------------------------------------------

def encoder_forward(x: Tensor, w: ModelWeights) -> EncoderFeatures:
    N, C, H, W = x.shape
    if H < 32 or W < 32:
        raise ValueError("input too small: need at least 32x32")
    d1 = ly.conv_block(x, w.encoder.stem1)               # full res
    d2 = ly.conv_block(d1, w.encoder.stem2)              # 1/2
    h = ad.conv2d(d2, w.encoder.patchify_w, w.encoder.patchify_b,
                  stride=2, pad=1)                       # 1/4
    feats = []
    for i, blocks in enumerate(w.encoder.stages):
        for b in blocks:
            h = ly.swin_block(h, b)
        feats.append(h)
        if i < len(w.encoder.merges):
            h = ly.patch_merge(h, w.encoder.merges[i])
    return EncoderFeatures(d1=d1, d2=d2, f1=feats[0], f2=feats[1],
                           f3=feats[2], f4=feats[3])


def aeal_stack_forward(f3: Tensor, f4: Tensor, w: ModelWeights) -> Tensor:
    a = w.aeal
    f_c = ly.residual_block(ad.conv2d(f4, a.ctx_proj_w, a.ctx_proj_b),
                            a.ctx_res)
    up4 = ad.upsample_nearest(f4, 2)
    # padded encoder ladders can leave up(F4) one pixel larger than F3
    if up4.shape[2:] != f3.shape[2:]:
        up4 = ad.crop(up4, (slice(None), slice(None),
                            slice(0, f3.shape[2]), slice(0, f3.shape[3])))
    g = ad.conv2d(ad.concat([up4, f3], axis=1), a.app_in_w, a.app_in_b, pad=1)
    g = ad.prelu(g, a.app_in_s)
    g = ly.residual_block(g, a.app_res)
    f_a = ad.conv2d(g, a.app_down_w, a.app_down_b, stride=2, pad=1)
    if f_a.shape[2:] != f_c.shape[2:]:
        f_a = ad.crop(f_a, (slice(None), slice(None),
                            slice(0, f_c.shape[2]), slice(0, f_c.shape[3])))
    h = f_c
    for blk in a.blocks:
        h = ly.aeal_block(h, f_a, blk)
    return h


def decoder_forward(feats: EncoderFeatures, f_rc: Tensor,
                    w: ModelWeights) -> Tensor:
    d = w.decoder
    skips = [feats.f4, feats.f3, feats.f2, feats.f1]
    h = f_rc
    for i in range(4):
        if i > 0:
            h = ad.upsample_nearest(h, 2)
            if h.shape[2:] != skips[i].shape[2:]:
                h = ad.crop(h, (slice(None), slice(None),
                                slice(0, skips[i].shape[2]),
                                slice(0, skips[i].shape[3])))
        h = ad.conv2d(ad.concat([h, skips[i]], axis=1), d.fuse_w[i],
                      d.fuse_b[i])
        for b in d.swins[i]:
            h = ly.swin_block(h, b)
    h = ad.upsample_nearest(h, 2)                        # 1/2
    h = ly.conv_block(ad.concat([h, feats.d2], axis=1), d.detail1)
    h = ad.upsample_nearest(h, 2)                        # full
    h = ly.conv_block(ad.concat([h, feats.d1], axis=1), d.detail2)
    alpha = ad.conv2d(h, d.head_w, d.head_b, pad=1)
    return ad.clamp(alpha, 0.0, 1.0)


def one_hot_trimap(trimap: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(H, W) map with values {0, 128, 255} -> (3, H, W) one-hot planes
    ordered background, unknown, foreground."""
    return np.stack([(trimap == 0), (trimap == 128), (trimap == 255)]) \
        .astype(dtype)


def model_forward(image: Tensor, trimap_onehot: Tensor,
                  w: ModelWeights) -> Tensor:
    """Run the network; pads non-multiple-of-32 inputs reflectively and
    crops the prediction back."""
    if image.shape[0] != trimap_onehot.shape[0] or \
            image.shape[2:] != trimap_onehot.shape[2:]:
        raise ValueError("image / trimap size mismatch")
    x = ad.concat([image, trimap_onehot], axis=1)
    N, C, H, W = x.shape
    ph = (-H) % 32
    pw = (-W) % 32
    if ph or pw:
        data = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)),
                      mode="reflect")
        x = Tensor(data, dtype=x.dtype)
    feats = encoder_forward(x, w)
    f_rc = aeal_stack_forward(feats.f3, feats.f4, w)
    alpha = decoder_forward(feats, f_rc, w)
    if ph or pw:
        alpha = ad.crop(alpha, (slice(None), slice(None),
                                slice(0, H), slice(0, W)))
    return alpha


def predict(image: np.ndarray, trimap: np.ndarray, w: ModelWeights,
            tta_hflip=False) -> np.ndarray:
    """Numpy-in / numpy-out inference. image is (3, H, W) in [0, 1],
    trimap (H, W) with {0, 128, 255}."""
    dtype = next(iter(w.tensors().values())).dtype
    img = Tensor(image[None].astype(dtype))
    tri = Tensor(one_hot_trimap(trimap, dtype)[None])
    out = model_forward(img, tri, w).data[0, 0]
    if tta_hflip:
        img_f = Tensor(image[None, :, :, ::-1].astype(dtype).copy())
        tri_f = Tensor(one_hot_trimap(trimap[:, ::-1], dtype)[None].copy())
        out_f = model_forward(img_f, tri_f, w).data[0, 0][:, ::-1]
        out = 0.5 * (out + out_f)
    return out


# --------------------------------------------------------------------------
# checkpoint format: magic "AEMT", version, named tensors, optional
# training-state section
# --------------------------------------------------------------------------

MAGIC = b"AEMT"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


class CheckpointError(ValueError):
    pass


def _write_tensor(f, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<Q", dim))
    f.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
    f.write(np.ascontiguousarray(arr).astype(arr.dtype).tobytes(order="C"))


def _read_tensor(f):
    raw = f.read(4)
    if len(raw) < 4:
        raise CheckpointError("truncated checkpoint")
    (nlen,) = struct.unpack("<I", raw)
    name = f.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<I", f.read(4))
    shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
    (code,) = struct.unpack("<B", f.read(1))
    dtype = _CODE_DTYPES[code]
    n = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(n * dtype.itemsize), dtype=dtype)
    return name, data.reshape(shape).copy()


def save_checkpoint(path, weights: ModelWeights, step: int = None,
                    opt_state: Dict[str, np.ndarray] = None):
    tensors = weights.tensors()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(f, name, tensors[name].data)
        if step is not None:
            f.write(b"TRN0")
            f.write(struct.pack("<Q", step))
            opt_state = opt_state or {}
            f.write(struct.pack("<I", len(opt_state)))
            for name in sorted(opt_state):
                _write_tensor(f, name, opt_state[name])


def load_checkpoint(path, weights: ModelWeights):
    """Load tensors into an existing weights collection; the name sets must
    match exactly. Returns (step, opt_state) or (None, None)."""
    tensors = weights.tensors()
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (count,) = struct.unpack("<I", f.read(4))
        seen = set()
        for _ in range(count):
            name, arr = _read_tensor(f)
            if name not in tensors:
                raise CheckpointError(f"unknown tensor {name!r}")
            if tensors[name].shape != arr.shape:
                raise CheckpointError(f"shape mismatch for {name!r}")
            tensors[name].data = arr.astype(tensors[name].dtype)
            seen.add(name)
        if seen != set(tensors):
            missing = sorted(set(tensors) - seen)
            raise CheckpointError(f"missing tensors: {missing[:5]}")
        marker = f.read(4)
        if marker == b"TRN0":
            (step,) = struct.unpack("<Q", f.read(8))
            (n,) = struct.unpack("<I", f.read(4))
            opt_state = {}
            for _ in range(n):
                name, arr = _read_tensor(f)
                opt_state[name] = arr
            return step, opt_state
    return None, None

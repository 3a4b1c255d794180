"""Training objective: whole-image L1, Charbonnier L1 over the unknown
trimap region, and a 2^j-weighted Laplacian-pyramid term, summed without
weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# separable binomial low-pass kernel
_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_KERNEL_2D = np.outer(_BINOMIAL, _BINOMIAL)


class LossError(ValueError):
    pass


@dataclass
class TrimapMask:
    """Boolean unknown-region mask with its pixel count."""
    mask: np.ndarray
    count: int

    @classmethod
    def from_trimap(cls, trimap: np.ndarray):
        m = trimap == 128
        return cls(mask=m, count=int(m.sum()))


@dataclass
class CharbonnierConfig:
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise LossError("epsilon must be positive")


def l1_loss(alpha: Tensor, alpha_gt: Tensor) -> Tensor:
    """Mean absolute difference over all pixels."""
    if alpha.shape != alpha_gt.shape:
        raise LossError("l1_loss: shape mismatch")
    return ad.abs_(ad.sub(alpha, alpha_gt)).mean()


def charbonnier_loss(alpha: Tensor, alpha_gt: Tensor, mask: TrimapMask,
                     epsilon: float = 1e-6) -> Tensor:
    """(1/|U|) sum_U sqrt((a - gt)^2 + eps^2)."""
    if mask.count < 1:
        raise LossError("charbonnier_loss: empty unknown region")
    m = Tensor(np.broadcast_to(mask.mask, alpha.shape)
               .astype(alpha.dtype))
    d = ad.mul(ad.sub(alpha, alpha_gt), m)
    per_pixel = ad.sqrt(ad.add(ad.square(d), epsilon ** 2))
    # masked-out pixels each contribute exactly eps; subtract them off
    total = ad.sub(per_pixel.sum(),
                   float(alpha.size - mask.count) * epsilon)
    return ad.mul(total, 1.0 / mask.count)


def _blur(x: Tensor) -> Tensor:
    kern = Tensor(_KERNEL_2D[None, None].astype(x.dtype))
    return ad.conv2d(ad.pad_reflect(x, (2, 2, 2, 2)), kern)


def _downsample(x: Tensor) -> Tensor:
    b = _blur(x)
    return ad.crop(b, (slice(None), slice(None),
                       slice(0, None, 2), slice(0, None, 2)))


def _upsample_match(x: Tensor, hw) -> Tensor:
    up = ad.upsample_nearest(x, 2)
    if up.shape[2] != hw[0] or up.shape[3] != hw[1]:
        up = ad.crop(up, (slice(None), slice(None),
                          slice(0, hw[0]), slice(0, hw[1])))
    return _blur(up)


def build_laplacian_pyramid(x: Tensor, levels: int) -> List[Tensor]:
    """`levels` band-pass tensors followed by the coarsest Gaussian
    residual; reconstruct() inverts it exactly by construction."""
    if levels < 1:
        raise LossError("need at least one pyramid level")
    if min(x.shape[2], x.shape[3]) < 2 ** levels:
        raise LossError("image too small for the requested pyramid depth")
    out = []
    g = x
    for _ in range(levels):
        down = _downsample(g)
        up = _upsample_match(down, (g.shape[2], g.shape[3]))
        out.append(ad.sub(g, up))
        g = down
    out.append(g)
    return out


def reconstruct_pyramid(levels: List[Tensor]) -> Tensor:
    g = levels[-1]
    for band in reversed(levels[:-1]):
        up = _upsample_match(g, (band.shape[2], band.shape[3]))
        g = ad.add(band, up)
    return g


def laplacian_loss(alpha: Tensor, alpha_gt: Tensor, levels: int = 4) -> Tensor:
    """sum_j 2^j * mean|L_j(a) - L_j(gt)| over band-pass levels, finest
    level indexed j = 0."""
    pa = build_laplacian_pyramid(alpha, levels)
    pg = build_laplacian_pyramid(alpha_gt, levels)
    total = None
    for j in range(levels):
        term = ad.mul(ad.abs_(ad.sub(pa[j], pg[j])).mean(), float(2 ** j))
        total = term if total is None else ad.add(total, term)
    return total


def total_loss(alpha: Tensor, alpha_gt: Tensor, mask: TrimapMask,
               cfg: CharbonnierConfig = None, pyramid_levels: int = 4):
    """Unweighted sum of the three terms; returns (total, breakdown)."""
    cfg = cfg or CharbonnierConfig()
    l1 = l1_loss(alpha, alpha_gt)
    cb = charbonnier_loss(alpha, alpha_gt, mask, cfg.epsilon)
    lap = laplacian_loss(alpha, alpha_gt, pyramid_levels)
    total = ad.add(ad.add(l1, cb), lap)
    breakdown = {"l1": l1.item(), "charbonnier": cb.item(),
                 "laplacian": lap.item()}
    return total, breakdown

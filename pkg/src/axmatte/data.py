"""Synthetic composite data: alpha blending, trimap synthesis via disk
erosion, patch sampling, augmentation, and PNG I/O.

Synthetic foreground families (anti-aliased disks, rings, blobs,
hair-like strokes, semi-transparent gradients) replace licensed matting
datasets; the study protocols need controllable unknown-region geometry,
not photorealism.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

FG = 255
UNK = 128
BG = 0


class DataError(ValueError):
    pass


@dataclass
class CompositeSample:
    """Image I = alpha*F + (1-alpha)*B with its factors and trimap.
    image/fg/bg are (3, H, W) float in [0, 1]; alpha (H, W); trimap (H, W)
    uint8 with {0, 128, 255}."""
    image: np.ndarray
    fg: np.ndarray
    bg: np.ndarray
    alpha: np.ndarray
    trimap: np.ndarray

    @property
    def hw(self):
        return self.alpha.shape


@dataclass
class SynthSpec:
    seed: int = 0
    size: int = 96
    min_shapes: int = 2
    max_shapes: int = 5
    trimap_dist: int = 3
    # unknown-fraction bounds checked at dilation distance 5
    min_unknown: float = 0.01
    max_unknown: float = 0.60


def composite(fg, bg, alpha) -> np.ndarray:
    if fg.shape != bg.shape or fg.shape[1:] != alpha.shape:
        raise DataError("composite: shape mismatch")
    return alpha[None] * fg + (1.0 - alpha[None]) * bg


def disk_offsets(d):
    r = int(np.floor(d))
    ys, xs = np.mgrid[-r:r + 1, -r:r + 1]
    keep = ys ** 2 + xs ** 2 <= d * d
    return np.stack([ys[keep], xs[keep]], axis=1)


def erode_disk(mask: np.ndarray, d: float) -> np.ndarray:
    """Binary erosion with a Euclidean disk of radius d; pixels outside the
    image are treated as matching the label."""
    if d <= 0:
        return mask.copy()
    r = int(np.floor(d))
    ys, xs = np.mgrid[-r:r + 1, -r:r + 1]
    selem = ys ** 2 + xs ** 2 <= d * d
    return ndimage.binary_erosion(mask, structure=selem, border_value=1)


def make_trimap(alpha: np.ndarray, d: float) -> np.ndarray:
    """{0, 128, 255} trimap: eroded definite-foreground/-background, the
    rest unknown."""
    if d < 0:
        raise DataError("dilation distance must be >= 0")
    fg = erode_disk(alpha >= 1.0 - 1e-6, d)
    bg = erode_disk(alpha <= 1e-6, d)
    tri = np.full(alpha.shape, UNK, dtype=np.uint8)
    tri[fg] = FG
    tri[bg] = BG
    return tri


# --------------------------------------------------------------------------
# synthetic foreground shapes
# --------------------------------------------------------------------------

def _coords(size):
    return np.mgrid[0:size, 0:size].astype(np.float64)


def _aa(dist):
    """Anti-alias a signed distance (negative inside) over a 1px band."""
    return np.clip(0.5 - dist, 0.0, 1.0)


def _shape_alpha(rng, size) -> np.ndarray:
    ys, xs = _coords(size)
    kind = rng.choice(["disk", "ring", "blob", "stroke", "gradient"])
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    if kind == "disk":
        r = rng.uniform(0.08, 0.3) * size
        return _aa(np.hypot(ys - cy, xs - cx) - r)
    if kind == "ring":
        r = rng.uniform(0.12, 0.3) * size
        w = rng.uniform(0.02, 0.08) * size + 1.0
        return _aa(np.abs(np.hypot(ys - cy, xs - cx) - r) - w)
    if kind == "blob":
        a = np.zeros((size, size))
        for _ in range(rng.integers(2, 5)):
            oy, ox = rng.uniform(-0.12, 0.12, 2) * size
            r = rng.uniform(0.06, 0.18) * size
            a = np.maximum(a, _aa(np.hypot(ys - cy - oy, xs - cx - ox) - r))
        return a
    if kind == "stroke":
        # hair-like polyline of thin segments
        a = np.zeros((size, size))
        p = np.array([cy, cx])
        ang = rng.uniform(0, 2 * np.pi)
        for _ in range(rng.integers(4, 9)):
            ang += rng.normal(0, 0.5)
            q = p + np.array([np.sin(ang), np.cos(ang)]) * size * 0.12
            d = _segment_distance(ys, xs, p, q)
            a = np.maximum(a, _aa(d - rng.uniform(0.4, 1.2)))
            p = q
        return a
    # semi-transparent gradient patch
    r = rng.uniform(0.15, 0.35) * size
    dist = np.hypot(ys - cy, xs - cx)
    peak = rng.uniform(0.4, 0.9)
    return np.clip(peak * (1.0 - dist / r), 0.0, 1.0)


def _segment_distance(ys, xs, p, q):
    v = q - p
    L2 = float(v @ v) + 1e-12
    t = np.clip(((ys - p[0]) * v[0] + (xs - p[1]) * v[1]) / L2, 0, 1)
    return np.hypot(ys - p[0] - t * v[0], xs - p[1] - t * v[1])


def _texture(rng, size, smooth):
    base = rng.random((3, 1, 1)) * np.ones((3, size, size))
    noise = rng.random((3, size, size))
    tex = 0.6 * base + 0.4 * ndimage.gaussian_filter(noise, (0, smooth, smooth))
    return np.clip(tex, 0.0, 1.0)


def synth_sample(spec: SynthSpec, index: int) -> CompositeSample:
    """Deterministic per-(seed, index) composite with a nontrivial unknown
    region; resamples internally up to a bounded retry count."""
    for attempt in range(32):
        rng = np.random.default_rng((spec.seed, index, attempt))
        size = spec.size
        alpha = np.zeros((size, size))
        n = rng.integers(spec.min_shapes, spec.max_shapes + 1)
        for _ in range(n):
            alpha = np.maximum(alpha, _shape_alpha(rng, size))
        alpha = np.clip(alpha, 0.0, 1.0)
        unk = (make_trimap(alpha, 5) == UNK).mean()
        if not (spec.min_unknown <= unk <= spec.max_unknown):
            continue
        fg = _texture(rng, size, smooth=4.0)
        bg = _texture(rng, size, smooth=8.0)
        img = composite(fg, bg, alpha)
        tri = make_trimap(alpha, spec.trimap_dist)
        return CompositeSample(image=img, fg=fg, bg=bg, alpha=alpha,
                               trimap=tri)
    raise DataError(f"could not synthesize sample {index}: unknown-region "
                    "bounds never satisfied")


def synth_dataset(spec: SynthSpec, n: int) -> List[CompositeSample]:
    return [synth_sample(spec, i) for i in range(n)]


# --------------------------------------------------------------------------
# patch sampling and augmentation
# --------------------------------------------------------------------------

def sample_patch(sample: CompositeSample, size: int,
                 rng: np.random.Generator) -> CompositeSample:
    """Crop of all five fields, centered on a random unknown pixel when one
    exists."""
    h, w = sample.hw
    if size > h or size > w:
        raise DataError(f"patch {size} exceeds canvas {h}x{w}")
    unk = np.argwhere(sample.trimap == UNK)
    if len(unk):
        cy, cx = unk[rng.integers(len(unk))]
    else:
        cy, cx = rng.integers(h), rng.integers(w)
    y0 = int(np.clip(cy - size // 2, 0, h - size))
    x0 = int(np.clip(cx - size // 2, 0, w - size))
    sl = (slice(y0, y0 + size), slice(x0, x0 + size))
    return CompositeSample(
        image=sample.image[:, sl[0], sl[1]].copy(),
        fg=sample.fg[:, sl[0], sl[1]].copy(),
        bg=sample.bg[:, sl[0], sl[1]].copy(),
        alpha=sample.alpha[sl].copy(),
        trimap=sample.trimap[sl].copy(),
    )


@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    scale_range: Tuple[float, float] = (0.75, 1.25)
    brightness: float = 0.10


def _rescale(sample: CompositeSample, factor: float) -> CompositeSample:
    h, w = sample.hw
    nh, nw = max(8, int(round(h * factor))), max(8, int(round(w * factor)))

    def zoom_chw(a):
        return np.stack([_zoom2d(c, nh, nw) for c in a])

    fg = zoom_chw(sample.fg)
    bg = zoom_chw(sample.bg)
    alpha = np.clip(_zoom2d(sample.alpha, nh, nw), 0.0, 1.0)
    # nearest-neighbor keeps the trimap 3-valued and in lockstep with alpha
    zy, zx = nh / h, nw / w
    tri = ndimage.zoom(sample.trimap, (zy, zx), order=0,
                       grid_mode=True, mode="nearest")[:nh, :nw]
    return CompositeSample(image=composite(fg, bg, alpha), fg=fg, bg=bg,
                           alpha=alpha, trimap=tri)


def _zoom2d(a, nh, nw):
    zy, zx = nh / a.shape[0], nw / a.shape[1]
    out = ndimage.zoom(a, (zy, zx), order=1, grid_mode=True, mode="nearest")
    return out[:nh, :nw]


def augment(sample: CompositeSample, cfg: AugmentConfig,
            rng: np.random.Generator) -> CompositeSample:
    """Horizontal flip, isotropic rescale + re-crop, brightness jitter;
    geometry is applied to every field in lockstep. The jitter scales the
    colors (foreground and background alike) so the blend identity keeps
    holding on the re-composited image; alpha and trimap are untouched."""
    s = sample
    if rng.random() < cfg.hflip_prob:
        s = hflip(s)
    factor = rng.uniform(*cfg.scale_range)
    scaled = _rescale(s, factor)
    target = min(s.hw[0], s.hw[1], scaled.hw[0], scaled.hw[1])
    s = sample_patch(scaled, target, rng)
    jitter = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
    fg = np.clip(s.fg * jitter, 0.0, 1.0)
    bg = np.clip(s.bg * jitter, 0.0, 1.0)
    return CompositeSample(image=composite(fg, bg, s.alpha), fg=fg, bg=bg,
                           alpha=s.alpha, trimap=s.trimap)


def hflip(s: CompositeSample) -> CompositeSample:
    return CompositeSample(
        image=s.image[:, :, ::-1].copy(), fg=s.fg[:, :, ::-1].copy(),
        bg=s.bg[:, :, ::-1].copy(), alpha=s.alpha[:, ::-1].copy(),
        trimap=s.trimap[:, ::-1].copy())


# --------------------------------------------------------------------------
# image I/O and dataset directory layout
# --------------------------------------------------------------------------

def save_rgb(path, img):
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"cannot read image {path}: {e}") from None
    return (arr / 255.0).transpose(2, 0, 1)


def save_gray(path, a):
    arr = np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"cannot read image {path}: {e}") from None
    return arr / 255.0


def save_trimap(path, tri):
    Image.fromarray(tri.astype(np.uint8), mode="L").save(path)


def load_trimap(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"cannot read trimap {path}: {e}") from None
    bad = set(np.unique(arr)) - {BG, UNK, FG}
    if bad:
        raise DataError(f"trimap {path} has values outside {{0,128,255}}: "
                        f"{sorted(bad)[:5]}")
    return arr


def write_dataset(root, samples: List[CompositeSample]):
    root = Path(root)
    for sub in ("image", "alpha", "trimap"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        name = f"{i:04d}.png"
        save_rgb(root / "image" / name, s.image)
        save_gray(root / "alpha" / name, s.alpha)
        save_trimap(root / "trimap" / name, s.trimap)
        h, w = s.hw
        rows.append({"id": f"{i:04d}", "width": w, "height": h,
                     "unk_fraction": f"{(s.trimap == UNK).mean():.6f}"})
    with open(root / "manifest.csv", "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=["id", "width", "height",
                                           "unk_fraction"])
        wr.writeheader()
        wr.writerows(rows)


def read_dataset(root) -> List[CompositeSample]:
    """Load image/alpha/trimap triples; foreground and background are not
    stored, so they are filled with the image itself (blend-consistent)."""
    root = Path(root)
    with open(root / "manifest.csv") as f:
        ids = [row["id"] for row in csv.DictReader(f)]
    out = []
    for sid in ids:
        img = load_rgb(root / "image" / f"{sid}.png")
        alpha = load_gray(root / "alpha" / f"{sid}.png")
        tri = load_trimap(root / "trimap" / f"{sid}.png")
        out.append(CompositeSample(image=img, fg=img.copy(), bg=img.copy(),
                                   alpha=alpha, trimap=tri))
    return out

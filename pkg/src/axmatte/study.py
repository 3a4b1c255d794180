"""Empirical study protocols: patch-based inference and training sweeps,
trimap-width robustness, convolution kernel-size sweep, and effective
receptive field maps. Each protocol returns rows with a fixed schema and
can be serialized as CSV; maps become 8-bit grayscale heatmaps."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from . import data as dt
from . import metrics as mt
from . import model as md
from . import train as tr
from .autodiff import Tensor

ROW_FIELDS = ("protocol", "setting", "seed", "sad", "mse", "grad", "conn",
              "extra")


class StudyError(ValueError):
    pass


@dataclass
class StudyConfig:
    protocol: str
    sweep: Sequence[float]
    seeds: Sequence[int] = (0,)
    steps: int = 60
    lr: float = 1e-3

    def __post_init__(self):
        if len(self.sweep) < 2:
            raise StudyError("need at least two sweep values")
        if len(self.seeds) < 1:
            raise StudyError("need at least one seed")


@dataclass
class ERFMap:
    """Mean absolute input-sensitivity of the center output pixel,
    normalized to a max of 1."""
    values: np.ndarray
    area: int


def _row(protocol, setting, seed, report: mt.MetricReport, extra=""):
    return {"protocol": protocol, "setting": str(setting), "seed": seed,
            "sad": f"{report.sad:.6g}", "mse": f"{report.mse:.6g}",
            "grad": f"{report.grad:.6g}", "conn": f"{report.conn:.6g}",
            "extra": extra}


def _mean_report(reports: List[mt.MetricReport]) -> mt.MetricReport:
    return mt.MetricReport(
        sad=float(np.mean([r.sad for r in reports])),
        mse=float(np.mean([r.mse for r in reports])),
        grad=float(np.mean([r.grad for r in reports])),
        conn=float(np.mean([r.conn for r in reports])),
        conn_fallback=any(r.conn_fallback for r in reports))


# --------------------------------------------------------------------------
# tiled inference with feathered overlap blending
# --------------------------------------------------------------------------

def _feather(size: int) -> np.ndarray:
    """Separable raised-cosine window, strictly positive everywhere so the
    weight sum never vanishes."""
    i = np.arange(size, dtype=np.float64)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * (i + 0.5) / size)
    return np.outer(w, w)


def _tile_starts(extent: int, size: int, stride: int) -> List[int]:
    if extent <= size:
        return [0]
    starts = list(range(0, extent - size, stride))
    starts.append(extent - size)
    return starts


def tiled_predict(image: np.ndarray, trimap: np.ndarray, w: md.ModelWeights,
                  size: int, stride: int = None) -> np.ndarray:
    """Predict alpha by running the model on overlapping square tiles and
    blending the overlaps with feather weights."""
    if size < 32:
        raise StudyError("tile size must be at least 32")
    h, wd = trimap.shape
    if size >= h and size >= wd:
        return md.predict(image, trimap, w)
    stride = stride or max(1, size // 2)
    acc = np.zeros((h, wd), dtype=np.float64)
    wsum = np.zeros((h, wd), dtype=np.float64)
    feather = _feather(size)
    for y in _tile_starts(h, size, stride):
        for x in _tile_starts(wd, size, stride):
            y1, x1 = min(y + size, h), min(x + size, wd)
            pred = md.predict(image[:, y:y1, x:x1], trimap[y:y1, x:x1], w)
            ft = feather[: y1 - y, : x1 - x]
            acc[y:y1, x:x1] += pred * ft
            wsum[y:y1, x:x1] += ft
    return (acc / wsum).astype(image.dtype)


def patch_inference_study(weights: md.ModelWeights,
                          dataset: List[dt.CompositeSample],
                          sizes: Sequence[int], seed: int = 0,
                          extra: str = "") -> List[dict]:
    """One whole-image row plus one row per tile size; metrics are the
    dataset means."""
    rows = []
    whole = [mt.evaluate(md.predict(s.image, s.trimap, weights),
                         s.alpha, s.trimap) for s in dataset]
    rows.append(_row("patch-infer", "whole", seed, _mean_report(whole),
                     extra))
    for size in sizes:
        reps = [mt.evaluate(tiled_predict(s.image, s.trimap, weights, size),
                            s.alpha, s.trimap) for s in dataset]
        rows.append(_row("patch-infer", size, seed, _mean_report(reps),
                         extra))
    return rows


def training_steps_for(size: int, max_size: int, base_steps: int) -> int:
    """Equal-pixel budget: smaller patches get proportionally more steps."""
    return int(round(base_steps * (max_size / size) ** 2))


def patch_training_study(model_cfg: md.ModelConfig,
                         sizes: Sequence[int],
                         train_set: List[dt.CompositeSample],
                         eval_set: List[dt.CompositeSample],
                         base_steps: int = 60, lr: float = 1e-3,
                         batch_size: int = 2, seed: int = 0,
                         extra: str = "") -> List[dict]:
    """Train one model per patch size with an equal total pixel budget and
    evaluate each on the same held-out set."""
    max_size = max(sizes)
    rows = []
    for size in sizes:
        steps = training_steps_for(size, max_size, base_steps)
        if steps < 1:
            raise StudyError(f"pixel budget gives zero steps at size {size}")
        cfg = tr.TrainConfig(steps=steps, batch_size=batch_size, lr=lr,
                             warmup=max(1, steps // 10), seed=seed,
                             patch_size=size)
        w = md.build_weights(model_cfg, seed=seed)
        tr.train(w, train_set, cfg)
        reps = [mt.evaluate(md.predict(s.image, s.trimap, w),
                            s.alpha, s.trimap) for s in eval_set]
        note = f"steps={steps}" + (f";{extra}" if extra else "")
        rows.append(_row("patch-train", size, seed, _mean_report(reps),
                         note))
    return rows


def trimap_robustness_study(weights: md.ModelWeights,
                            dataset: List[dt.CompositeSample],
                            distances: Sequence[int], seed: int = 0,
                            extra: str = "") -> List[dict]:
    """Regenerate each sample's trimap at every unknown-band half-width d
    and evaluate; rows sorted by d with the unknown-pixel count logged."""
    rows = []
    for d in sorted(distances):
        reps, unk = [], 0
        for s in dataset:
            tri = dt.make_trimap(s.alpha, d)
            unk += int((tri == dt.UNK).sum())
            reps.append(mt.evaluate(md.predict(s.image, tri, weights),
                                    s.alpha, tri))
        note = f"unk={unk}" + (f";{extra}" if extra else "")
        rows.append(_row("trimap", d, seed, _mean_report(reps), note))
    return rows


def kernel_size_study(model_cfg: md.ModelConfig,
                      kernels: Sequence[int],
                      train_set: List[dt.CompositeSample],
                      eval_set: List[dt.CompositeSample],
                      steps: int = 60, lr: float = 1e-3,
                      batch_size: int = 2, patch_size: int = 64,
                      seed: int = 0, extra: str = "") -> List[dict]:
    """Swap the kernel size of every second stem / detail-fusion
    convolution, train each variant briefly, and evaluate."""
    rows = []
    for k in kernels:
        if k not in (1, 3, 5):
            raise StudyError(f"unsupported kernel size {k}")
        cfg = dataclasses.replace(model_cfg, alt_kernel=k)
        w = md.build_weights(cfg, seed=seed)
        n_params = md.count_parameters(w)
        tcfg = tr.TrainConfig(steps=steps, batch_size=batch_size, lr=lr,
                              warmup=max(1, steps // 10), seed=seed,
                              patch_size=patch_size)
        tr.train(w, train_set, tcfg)
        reps = [mt.evaluate(md.predict(s.image, s.trimap, w),
                            s.alpha, s.trimap) for s in eval_set]
        note = f"params={n_params}" + (f";{extra}" if extra else "")
        rows.append(_row("kernel", k, seed, _mean_report(reps), note))
    return rows


# --------------------------------------------------------------------------
# effective receptive field
# --------------------------------------------------------------------------

def erf_map(weights: md.ModelWeights, size: int = 64, probes: int = 4,
            seed: int = 0) -> ERFMap:
    """Backpropagate a unit gradient from the center output pixel to the
    input image over a batch of random composites; return the normalized
    mean absolute input gradient."""
    acc = np.zeros((size, size), dtype=np.float64)
    spec = dt.SynthSpec(seed=seed, size=size)
    dtype = next(iter(weights.tensors().values())).dtype
    for i in range(probes):
        s = dt.synth_sample(spec, i)
        img = Tensor(s.image[None].astype(dtype), requires_grad=True)
        tri = Tensor(md.one_hot_trimap(s.trimap, dtype)[None])
        out = md.model_forward(img, tri, weights)
        g = np.zeros_like(out.data)
        g[0, 0, out.shape[2] // 2, out.shape[3] // 2] = 1.0
        out.backward(g)
        acc += np.abs(img.grad[0]).mean(axis=0)
    acc /= probes
    peak = acc.max()
    if peak <= 0:
        raise StudyError("degenerate map: center pixel has no input "
                         "dependence")
    values = acc / peak
    area = int((values > 0.01).sum())
    return ERFMap(values=values, area=area)


# --------------------------------------------------------------------------
# artifact output
# --------------------------------------------------------------------------

def emit_rows(rows: List[dict], path):
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(ROW_FIELDS))
        wr.writeheader()
        wr.writerows(rows)


def read_rows(path) -> List[dict]:
    with open(path, newline="") as f:
        rd = csv.DictReader(f)
        if tuple(rd.fieldnames) != ROW_FIELDS:
            raise StudyError(f"{path}: unexpected header {rd.fieldnames}")
        return list(rd)


def emit_heatmap(m: ERFMap, path):
    """Write the map as an 8-bit PGM plus a PNG twin (same stem)."""
    path = Path(path)
    img = np.clip(np.round(m.values * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path.with_suffix(".pgm"), "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())
    Image.fromarray(img, mode="L").save(path.with_suffix(".png"))

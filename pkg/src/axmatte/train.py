"""Training loop: adaptive-moment optimizer, linear warmup + cosine decay,
per-step loss logging, periodic checkpoints, NaN abort."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import data as dt
from . import losses as ls
from . import model as md
from .autodiff import Tensor


class TrainAbort(RuntimeError):
    """Raised when the loss goes non-finite; the last good checkpoint is
    left on disk."""


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 2
    lr: float = 1e-3
    warmup: int = 20
    seed: int = 0
    patch_size: int = 64
    ckpt_every: int = 100
    augment: bool = False
    epsilon: float = 1e-6
    pyramid_levels: int = 4

    def __post_init__(self):
        if min(self.steps, self.batch_size, self.patch_size) <= 0 \
                or self.lr <= 0:
            raise ValueError("training config values must be positive")


def config_hash(*objs) -> str:
    blob = json.dumps([asdict(o) if hasattr(o, "__dataclass_fields__")
                       else o for o in objs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


class Adam:
    """Adaptive-moment optimizer over a named tensor dict."""

    def __init__(self, tensors: Dict[str, Tensor], beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.tensors = tensors
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in tensors.items()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.tensors.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2)
                                               + self.eps)

    def zero_grad(self):
        for p in self.tensors.values():
            p.zero_grad()

    def state(self) -> Dict[str, np.ndarray]:
        out = {}
        for k in self.tensors:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, state: Dict[str, np.ndarray], t: int):
        self.t = t
        for k in self.tensors:
            if f"adam.m.{k}" in state:
                self.m[k] = state[f"adam.m.{k}"].copy()
                self.v[k] = state[f"adam.v.{k}"].copy()


def lr_at(step, cfg: TrainConfig) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(1, cfg.steps - cfg.warmup)
    frac = (step - cfg.warmup) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def make_batch(samples, cfg: TrainConfig, rng, dtype=np.float32):
    imgs, tris, alphas = [], [], []
    for _ in range(cfg.batch_size):
        s = samples[rng.integers(len(samples))]
        if cfg.augment:
            s = dt.augment(s, dt.AugmentConfig(), rng)
        if s.hw != (cfg.patch_size, cfg.patch_size):
            s = dt.sample_patch(s, min(cfg.patch_size, *s.hw), rng)
        imgs.append(s.image)
        tris.append(md.one_hot_trimap(s.trimap, dtype))
        alphas.append((s.alpha[None], s.trimap[None]))
    img = Tensor(np.stack(imgs).astype(dtype))
    tri = Tensor(np.stack(tris))
    alpha_gt = Tensor(np.stack([a for a, _ in alphas]).astype(dtype))
    trimap = np.stack([t for _, t in alphas])
    return img, tri, alpha_gt, trimap


def train(weights: md.ModelWeights, samples, cfg: TrainConfig,
          out_dir=None, log_name="loss_log.csv",
          resume_from=None) -> List[dict]:
    """Run the loop; returns the loss-log rows (also written as CSV when
    out_dir is given)."""
    tensors = weights.tensors()
    opt = Adam(tensors)
    start_step = 0
    if resume_from is not None:
        step, state = md.load_checkpoint(resume_from, weights)
        if step is not None:
            start_step = step
            opt.load_state(state, step)

    rng = np.random.default_rng(cfg.seed)
    # replay batch draws consumed before the resume point
    for _ in range(start_step):
        make_batch(samples, cfg, rng)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    run_id = config_hash(cfg)
    rows = []
    ckpt_path = out_dir / "model.ckpt" if out_dir else None

    for step in range(start_step, cfg.steps):
        img, tri, alpha_gt, trimap = make_batch(samples, cfg, rng)
        alpha = md.model_forward(img, tri, weights)
        mask = ls.TrimapMask.from_trimap(trimap)
        loss, parts = ls.total_loss(alpha, alpha_gt, mask,
                                    ls.CharbonnierConfig(cfg.epsilon),
                                    cfg.pyramid_levels)
        value = loss.item()
        if not math.isfinite(value):
            if out_dir is not None:
                _write_log(out_dir / log_name, rows, run_id)
            raise TrainAbort(f"non-finite loss at step {step}; last good "
                             f"checkpoint: {ckpt_path}")
        opt.zero_grad()
        loss.backward()
        lr = lr_at(step, cfg)
        opt.step(lr)
        rows.append({"step": step, "lr": f"{lr:.8g}",
                     "total": f"{value:.8g}",
                     "l1": f"{parts['l1']:.8g}",
                     "charbonnier": f"{parts['charbonnier']:.8g}",
                     "laplacian": f"{parts['laplacian']:.8g}",
                     "config_hash": run_id})
        if out_dir is not None and ((step + 1) % cfg.ckpt_every == 0
                                    or step + 1 == cfg.steps):
            md.save_checkpoint(ckpt_path, weights, step=step + 1,
                               opt_state=opt.state())
            _write_log(out_dir / log_name, rows, run_id)
    if out_dir is not None:
        md.save_checkpoint(ckpt_path, weights, step=cfg.steps,
                           opt_state=opt.state())
        _write_log(out_dir / log_name, rows, run_id)
    return rows


def _write_log(path, rows, run_id):
    if not rows:
        return
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        wr.writeheader()
        wr.writerows(rows)

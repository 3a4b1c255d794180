"""Command-line entry point.

Commands: synth, train, infer, eval, study {patch-infer|patch-train|trimap|
kernel|erf}. Configuration is a flat key=value file with [section] headers;
every output CSV records hash(config, seed) so a run is reproducible from
its artifacts.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from . import data as dt
from . import losses as ls
from . import metrics as mt
from . import model as md
from . import study as st
from . import train as tr

STUDY_PROTOCOLS = ("patch-infer", "patch-train", "trimap", "kernel", "erf")

_PRESETS = {"default": md.ModelConfig, "tiny": md.tiny_config,
            "overfit": md.overfit_config}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def load_config(path=None) -> dict:
    """Read the key=value config file into {section: {key: str}}."""
    cp = configparser.ConfigParser()
    if path is not None:
        read = cp.read(path)
        if not read:
            raise UsageError(f"config file not found: {path}")
    return {s: dict(cp[s]) for s in cp.sections()}


def _coerce(text: str):
    s = text.strip()
    if "," in s:
        return tuple(_coerce(p) for p in s.split(","))
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    if s.lower() in ("true", "false"):
        return s.lower() == "true"
    return s


def model_config(cfg: dict) -> md.ModelConfig:
    sec = dict(cfg.get("model", {}))
    preset = sec.pop("preset", "default")
    if preset not in _PRESETS:
        raise UsageError(f"unknown model preset {preset!r}; "
                         f"choose from {sorted(_PRESETS)}")
    base = _PRESETS[preset]()
    overrides = {}
    for key, raw in sec.items():
        if key not in {f.name for f in dataclasses.fields(md.ModelConfig)}:
            raise UsageError(f"unknown model config key {key!r}")
        overrides[key] = _coerce(raw)
    return dataclasses.replace(base, **overrides) if overrides else base


def train_config(cfg: dict, seed=None, default_patch=64) -> tr.TrainConfig:
    sec = {k: _coerce(v) for k, v in cfg.get("train", {}).items()}
    loss = {k: _coerce(v) for k, v in cfg.get("loss", {}).items()}
    sec.setdefault("patch_size", default_patch)
    if seed is not None:
        sec["seed"] = seed
    known = {f.name for f in dataclasses.fields(tr.TrainConfig)}
    for key in list(sec) + list(loss):
        if key not in known:
            raise UsageError(f"unknown train/loss config key {key!r}")
    return tr.TrainConfig(**sec, **loss)


def synth_spec(cfg: dict, seed=None):
    sec = {k: _coerce(v) for k, v in cfg.get("data", {}).items()}
    n = int(sec.pop("n", 8))
    sec.pop("root", None)
    if seed is not None:
        sec["seed"] = seed
    known = {f.name for f in dataclasses.fields(dt.SynthSpec)}
    for key in sec:
        if key not in known:
            raise UsageError(f"unknown data config key {key!r}")
    return dt.SynthSpec(**sec), n


def load_samples(cfg: dict, seed=None):
    root = cfg.get("data", {}).get("root")
    if root and root != "synth":
        return dt.read_dataset(root)
    spec, n = synth_spec(cfg, seed)
    return dt.synth_dataset(spec, n)


def out_dir(args) -> Path:
    if args.out:
        p = Path(args.out)
    else:
        p = Path("runs") / time.strftime("%Y%m%d-%H%M%S")
    p.mkdir(parents=True, exist_ok=True)
    return p


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    spec, n = synth_spec(cfg, args.seed)
    root = Path(args.out) if args.out else None
    if root is None:
        raise UsageError("synth requires --out DIR")
    samples = dt.synth_dataset(spec, n)
    dt.write_dataset(root, samples)
    print(f"wrote {n} samples under {root}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    mcfg = model_config(cfg)
    samples = load_samples(cfg, args.seed)
    patch = min(min(s.hw) for s in samples)
    tcfg = train_config(cfg, args.seed, default_patch=patch)
    run = out_dir(args)
    weights = md.build_weights(mcfg, seed=tcfg.seed)
    rows = tr.train(weights, samples, tcfg, out_dir=run,
                    resume_from=args.resume)
    print(f"trained {len(rows)} steps; final loss {rows[-1]['total']}; "
          f"artifacts under {run}")
    return 0


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    weights = md.build_weights(model_config(cfg))
    md.load_checkpoint(args.checkpoint, weights)
    image = dt.load_rgb(args.image)
    trimap = dt.load_trimap(args.trimap)
    alpha = md.predict(image, trimap, weights, tta_hflip=args.tta_hflip)
    dt.save_gray(args.alpha_out, alpha)
    print(f"wrote {args.alpha_out}")
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir, tri_dir = (Path(args.pred), Path(args.gt),
                                 Path(args.trimap))
    run_id = tr.config_hash({"seed": args.seed or 0})
    rows = []
    preds = sorted(pred_dir.glob("*.png"))
    if not preds:
        raise FileNotFoundError(f"no predictions under {pred_dir}")
    for p in preds:
        sid = p.stem
        gt_p, tri_p = gt_dir / p.name, tri_dir / p.name
        for q in (gt_p, tri_p):
            if not q.exists():
                raise FileNotFoundError(f"sample {sid}: missing {q}")
        rep = mt.evaluate(dt.load_gray(p), dt.load_gray(gt_p),
                          dt.load_trimap(tri_p))
        rows.append({"id": sid, "sad": rep.sad, "mse": rep.mse,
                     "grad": rep.grad, "conn": rep.conn,
                     "config_hash": run_id})
    mean = {"id": "mean", "config_hash": run_id}
    for k in ("sad", "mse", "grad", "conn"):
        mean[k] = float(np.mean([r[k] for r in rows]))
    rows.append(mean)
    run = out_dir(args)
    path = run / "eval.csv"
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=["id", "sad", "mse", "grad",
                                           "conn", "config_hash"])
        wr.writeheader()
        wr.writerows(rows)
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def _study_sweep(cfg: dict, key, default):
    raw = cfg.get("study", {}).get(key)
    if raw is None:
        return default
    val = _coerce(raw)
    return val if isinstance(val, tuple) else (val,)


def cmd_study(args) -> int:
    if args.protocol not in STUDY_PROTOCOLS:
        raise UsageError(f"unknown protocol {args.protocol!r}; valid: "
                         f"{', '.join(STUDY_PROTOCOLS)}")
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else 0
    mcfg = model_config(cfg)
    sec = {k: _coerce(v) for k, v in cfg.get("study", {}).items()}
    steps = int(sec.get("steps", 40))
    lr = float(sec.get("lr", 1e-3))
    run_id = tr.config_hash(cfg, seed)
    extra = f"cfg={run_id}"

    if args.protocol == "patch-infer":
        plan = _study_sweep(cfg, "sweep", (32, 48, 64))
    elif args.protocol == "patch-train":
        plan = _study_sweep(cfg, "sweep", (32, 64))
    elif args.protocol == "trimap":
        plan = _study_sweep(cfg, "sweep", (1, 3, 5, 7))
    elif args.protocol == "kernel":
        plan = _study_sweep(cfg, "sweep", (1, 3, 5))
    else:
        plan = (int(sec.get("size", 64)),)
    if args.dry_run:
        print(f"{args.protocol}: sweep {list(plan)} seed {seed} "
              f"steps {steps} (dry run)")
        return 0

    run = out_dir(args)
    samples = load_samples(cfg, seed)
    half = max(1, len(samples) // 2)
    train_set, eval_set = samples[:half], samples[half:] or samples[:half]

    if args.protocol == "erf":
        weights = _study_weights(args, cfg, mcfg, samples, steps, lr, seed)
        m = st.erf_map(weights, size=int(plan[0]),
                       probes=int(sec.get("probes", 4)), seed=seed)
        st.emit_heatmap(m, run / "erf")
        with open(run / "erf.csv", "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["protocol", "setting", "seed", "area", "extra"])
            wr.writerow(["erf", plan[0], seed, m.area, extra])
        print(f"erf area {m.area} px^2; artifacts under {run}")
        return 0

    if args.protocol == "patch-infer":
        weights = _study_weights(args, cfg, mcfg, samples, steps, lr, seed)
        rows = st.patch_inference_study(weights, eval_set,
                                        [int(s) for s in plan], seed, extra)
    elif args.protocol == "patch-train":
        rows = st.patch_training_study(mcfg, [int(s) for s in plan],
                                       train_set, eval_set,
                                       base_steps=steps, lr=lr, seed=seed,
                                       extra=extra)
    elif args.protocol == "trimap":
        weights = _study_weights(args, cfg, mcfg, samples, steps, lr, seed)
        rows = st.trimap_robustness_study(weights, eval_set,
                                          [int(d) for d in plan], seed,
                                          extra)
    else:
        rows = st.kernel_size_study(mcfg, [int(k) for k in plan],
                                    train_set, eval_set, steps=steps,
                                    lr=lr, seed=seed, extra=extra)
    path = run / f"{args.protocol}.csv"
    st.emit_rows(rows, path)
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def _study_weights(args, cfg, mcfg, samples, steps, lr, seed):
    """Trained weights for evaluation protocols: load a checkpoint when
    given, otherwise run a short training burst."""
    weights = md.build_weights(mcfg, seed=seed)
    if args.checkpoint:
        md.load_checkpoint(args.checkpoint, weights)
        return weights
    patch = min(32 * 2, min(min(s.hw) for s in samples))
    tcfg = tr.TrainConfig(steps=steps, batch_size=2, lr=lr,
                          warmup=max(1, steps // 10), seed=seed,
                          patch_size=patch)
    tr.train(weights, samples, tcfg)
    return weights


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="axmatte",
                description="Trimap-guided alpha matting toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="key=value config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--resume", default=None, help="checkpoint to resume")

    sp = sub.add_parser("infer", help="predict an alpha matte")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("image")
    sp.add_argument("trimap")
    sp.add_argument("alpha_out")
    sp.add_argument("--tta-hflip", action="store_true",
                    help="average with the horizontally-flipped prediction")

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    common(sp)
    sp.add_argument("pred")
    sp.add_argument("gt")
    sp.add_argument("trimap")

    sp = sub.add_parser("study", help="run an empirical study protocol")
    common(sp)
    sp.add_argument("protocol", help="|".join(STUDY_PROTOCOLS))
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--dry-run", action="store_true",
                    help="print the sweep plan without training")
    return p


_DISPATCH = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer,
             "eval": cmd_eval, "study": cmd_study}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return _DISPATCH[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures -> exit code 2
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

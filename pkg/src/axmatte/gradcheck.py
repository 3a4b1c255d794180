"""Central finite-difference gradient checking for the autodiff ops."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def numeric_grad(fn, tensors, wrt, h=1e-4, coords=None, rng=None):
    """Central finite differences of scalar `fn(*tensors)` wrt `tensors[wrt]`.

    `coords` limits the check to a subset of flat coordinates (all by
    default); returns (flat_coords, numeric_values).
    """
    t = tensors[wrt]
    flat = t.data.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    else:
        coords = np.asarray(coords)
    vals = np.empty(len(coords), dtype=np.float64)
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(*tensors).data)
        flat[i] = orig - h
        fm = float(fn(*tensors).data)
        flat[i] = orig
        vals[k] = (fp - fm) / (2.0 * h)
    return coords, vals


def check_gradients(fn, tensors, h=1e-4, atol=1e-12, rtol=1e-5,
                    max_coords=None, rng=None):
    """Assert analytic gradients of scalar fn(*tensors) match central
    differences for every tensor with requires_grad. Returns the worst
    relative error seen."""
    for t in tensors:
        t.zero_grad()
    out = fn(*tensors)
    out.backward()
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        n = t.data.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = None
        coords, num = numeric_grad(fn, tensors, i, h=h, coords=coords)
        ana = t.grad.reshape(-1)[coords]
        denom = np.maximum(np.abs(num), np.abs(ana))
        err = np.abs(ana - num) / np.maximum(denom, atol / rtol)
        worst = max(worst, float(err.max()) if err.size else 0.0)
        if not np.all(err < rtol):
            bad = int(np.argmax(err))
            raise AssertionError(
                f"gradient mismatch on tensor {i} coord {coords[bad]}: "
                f"analytic {ana[bad]:.8g} vs numeric {num[bad]:.8g} "
                f"(rel err {err[bad]:.3g})")
    return worst


def rand_tensor(rng, shape, requires_grad=True, scale=1.0, dtype=np.float64):
    return Tensor(rng.standard_normal(shape).astype(dtype) * scale,
                  requires_grad=requires_grad, dtype=dtype)

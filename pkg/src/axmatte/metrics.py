"""Matting evaluation metrics over the unknown trimap region: sum of
absolute differences, mean squared error, gradient-magnitude discrepancy,
and connectivity discrepancy, with the community-standard constants
(Gaussian sigma 1.4, connectivity step 0.1, tolerance 0.15) and the usual
scale factors (SAD and the summed metrics / 1e3, MSE * 1e3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    sad: float
    mse: float
    grad: float
    conn: float
    conn_fallback: bool = False  # no fully-opaque region in both mattes
    region: str = "unknown-only"

    def as_dict(self):
        return {"sad": self.sad, "mse": self.mse, "grad": self.grad,
                "conn": self.conn}


def _unknown(trimap):
    return trimap == 128


def _check(alpha, gt, trimap):
    if alpha.shape != gt.shape or alpha.shape != trimap.shape:
        raise MetricError("metric inputs must share one shape")


def sad(alpha, gt, trimap) -> float:
    _check(alpha, gt, trimap)
    u = _unknown(trimap)
    return float(np.abs(alpha - gt)[u].sum()) / 1000.0


def mse(alpha, gt, trimap) -> float:
    _check(alpha, gt, trimap)
    u = _unknown(trimap)
    if not u.any():
        return 0.0
    return float(np.square(alpha - gt)[u].mean()) * 1000.0


def _gauss_deriv_filters(sigma=1.4):
    """First-order Gaussian derivative pair, truncated at 3 sigma."""
    half = int(np.ceil(3 * sigma))
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    dg = -x / sigma ** 2 * g
    return g, dg


def gradient_magnitude(a, sigma=1.4):
    g, dg = _gauss_deriv_filters(sigma)
    gx = ndimage.correlate1d(ndimage.correlate1d(a.astype(np.float64), dg,
                                                 axis=1, mode="nearest"),
                             g, axis=0, mode="nearest")
    gy = ndimage.correlate1d(ndimage.correlate1d(a.astype(np.float64), dg,
                                                 axis=0, mode="nearest"),
                             g, axis=1, mode="nearest")
    return np.hypot(gx, gy)


def grad_metric(alpha, gt, trimap, sigma=1.4) -> float:
    _check(alpha, gt, trimap)
    u = _unknown(trimap)
    ga = gradient_magnitude(alpha, sigma)
    gg = gradient_magnitude(gt, sigma)
    return float(np.square(ga - gg)[u].sum()) / 1000.0


_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def _largest_joint_component(alpha, gt, theta):
    both = (alpha >= theta) & (gt >= theta)
    labels, n = ndimage.label(both, structure=_FOUR)
    if n == 0:
        return None
    sizes = ndimage.sum_labels(np.ones_like(labels), labels,
                               index=np.arange(1, n + 1))
    return labels == (1 + int(np.argmax(sizes)))


def connectivity_levels(a, omega, thetas):
    """Per-pixel largest theta at which the pixel is 4-connected to omega
    in the theta-binarized map of `a`; 0 where never connected."""
    li = np.zeros(a.shape)
    for theta in thetas:
        binarized = a >= theta
        labels, n = ndimage.label(binarized, structure=_FOUR)
        if n == 0:
            continue
        omega_labels = np.unique(labels[omega & binarized])
        omega_labels = omega_labels[omega_labels > 0]
        connected = np.isin(labels, omega_labels) & binarized
        li[connected] = theta
    return li


def _phi(a, li, tol=0.15):
    d = a - li
    return 1.0 - np.where(d >= tol, d, 0.0)


def conn_metric(alpha, gt, trimap, step=0.1, tol=0.15):
    """Connectivity discrepancy; returns (value, fallback_flag)."""
    _check(alpha, gt, trimap)
    u = _unknown(trimap)
    thetas = np.round(np.arange(step, 0.95, step), 10)
    omega = _largest_joint_component(alpha, gt, 0.9)
    if omega is None:
        # degenerate: no fully-opaque region shared by both mattes
        return sad(alpha, gt, trimap), True
    la = connectivity_levels(alpha, omega, thetas)
    lg = connectivity_levels(gt, omega, thetas)
    pa = _phi(alpha, la, tol)
    pg = _phi(gt, lg, tol)
    return float(np.abs(pa - pg)[u].sum()) / 1000.0, False


def evaluate(alpha, gt, trimap) -> MetricReport:
    conn, fb = conn_metric(alpha, gt, trimap)
    return MetricReport(
        sad=sad(alpha, gt, trimap),
        mse=mse(alpha, gt, trimap),
        grad=grad_metric(alpha, gt, trimap),
        conn=conn,
        conn_fallback=fb,
    )

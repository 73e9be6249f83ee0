"""Synthetic Branin benchmark: the tilted-ellipse feasible region,
evaluation metrics, and a brute-force grid oracle for the concentration
of exp(-beta h) p onto the minimizers of h as beta grows."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .experts import BRANIN_MINIMIZERS, Objective

__all__ = [
    "EllipseRegion",
    "MetricsReport",
    "DoubleWellObjective",
    "gen_ellipse_dataset",
    "in_ellipse",
    "compute_metrics",
    "grid_oracle_prop21",
    "hessian_fd",
]


@dataclass(frozen=True)
class EllipseRegion:
    center: tuple = (-0.2, 7.5)
    semi_axes: tuple = (3.6, 8.0)
    tilt_deg: float = 25.0  # counterclockwise

    def __post_init__(self):
        if any(a <= 0 for a in self.semi_axes):
            raise ValueError("semi-axes must be positive")

    def _rotation(self) -> np.ndarray:
        th = math.radians(self.tilt_deg)
        c, s = math.cos(th), math.sin(th)
        return np.array([[c, -s], [s, c]])


BRANIN_ELLIPSE = EllipseRegion()


def in_ellipse(x, region: EllipseRegion = BRANIN_ELLIPSE) -> bool:
    """Rotate x - center by -tilt and apply the axis-aligned ellipse test."""
    u = region._rotation().T @ (np.asarray(x, dtype=float) - np.asarray(region.center))
    a, b = region.semi_axes
    return (u[0] / a) ** 2 + (u[1] / b) ** 2 <= 1.0


def in_ellipse_batch(X, region: EllipseRegion = BRANIN_ELLIPSE) -> np.ndarray:
    U = (np.atleast_2d(np.asarray(X, dtype=float)) - np.asarray(region.center)) @ region._rotation()
    a, b = region.semi_axes
    return (U[:, 0] / a) ** 2 + (U[:, 1] / b) ** 2 <= 1.0


def gen_ellipse_dataset(n: int, seed: int,
                        region: EllipseRegion = BRANIN_ELLIPSE) -> np.ndarray:
    """Uniform samples over the tilted ellipse, by rejection from the
    axis-aligned bounding box in the rotated frame."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    a, b = region.semi_axes
    R = region._rotation()
    c = np.asarray(region.center)
    out = np.empty((n, 2))
    filled = 0
    while filled < n:
        m = max(64, 2 * (n - filled))
        u = rng.uniform(-a, a, size=m)
        v = rng.uniform(-b, b, size=m)
        keep = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        pts = np.stack([u[keep], v[keep]], axis=1) @ R.T + c
        take = min(n - filled, pts.shape[0])
        out[filled : filled + take] = pts[:take]
        filled += take
    return out


@dataclass
class MetricsReport:
    feasibility_rate: float
    best_feasible_value: float | None
    topk_mean: float | None
    mode_counts: dict
    num_valid: int

    def to_json(self) -> dict:
        return {
            "feasibility_rate": self.feasibility_rate,
            "best_feasible_value": self.best_feasible_value,
            "topk_mean": self.topk_mean,
            "mode_counts": self.mode_counts,
            "num_valid": self.num_valid,
        }


MODE_KEYS = ("(-pi, 12.275)", "(pi, 2.275)", "(9.42478, 2.475)")


def compute_metrics(samples, objective: Objective, feasibility_test,
                    k: int = 10, mode_radius: float = 1.0) -> MetricsReport:
    """Feasibility rate, best and top-k objective values over the
    feasible subset, and per-minimizer mode counts (feasible samples
    within mode_radius of a quoted Branin minimizer; "other" otherwise)."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("no samples")
    feasible = np.array([bool(feasibility_test(x)) for x in X])
    n_feas = int(feasible.sum())
    mode_counts = {key: 0 for key in MODE_KEYS}
    mode_counts["other"] = 0
    if n_feas == 0:
        return MetricsReport(0.0, None, None, mode_counts, 0)
    Xf = X[feasible]
    vals = np.array([objective.value(x) for x in Xf])
    order = np.sort(vals)
    kk = min(k, len(order))
    for x in Xf:
        dists = [np.linalg.norm(x - m) for m in BRANIN_MINIMIZERS]
        j = int(np.argmin(dists))
        if dists[j] <= mode_radius:
            mode_counts[MODE_KEYS[j]] += 1
        else:
            mode_counts["other"] += 1
    return MetricsReport(
        feasibility_rate=n_feas / X.shape[0],
        best_feasible_value=float(order[0]),
        topk_mean=float(order[:kk].mean()),
        mode_counts=mode_counts,
        num_valid=n_feas,
    )


class DoubleWellObjective(Objective):
    """h(x) = (x^2 - 1)^2 in one dimension; wells at +-1 with equal Hessians."""

    dim = 1

    def eval_grad(self, x):
        x0 = float(np.asarray(x).ravel()[0])
        return (x0**2 - 1) ** 2, np.array([4 * x0 * (x0**2 - 1)])


def hessian_fd(h: Objective, x, eps: float = 1e-4) -> np.ndarray:
    """Central second-difference Hessian, symmetrized."""
    x = np.asarray(x, dtype=float)
    d = x.size
    H = np.zeros((d, d))
    f0 = h.value(x)
    for i in range(d):
        for j in range(i, d):
            if i == j:
                xp, xm = x.copy(), x.copy()
                xp[i] += eps
                xm[i] -= eps
                H[i, i] = (h.value(xp) - 2 * f0 + h.value(xm)) / eps**2
            else:
                xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
                xpp[[i, j]] += eps
                xmm[[i, j]] -= eps
                xpm[i] += eps
                xpm[j] -= eps
                xmp[i] -= eps
                xmp[j] += eps
                val = (h.value(xpp) - h.value(xpm) - h.value(xmp) + h.value(xmm)) / (4 * eps**2)
                H[i, j] = H[j, i] = val
    if not np.all(np.isfinite(H)):
        raise ValueError("non-finite Hessian entries")
    return H


def grid_oracle_prop21(h: Objective, log_p: np.ndarray, grid: np.ndarray,
                       beta: float, minimizers, radius: float = 0.5) -> dict:
    """Brute-force check of the concentration of exp(-beta h(x)) p(x).

    Normalizes exp(log_p - beta h) over a regular lattice (accumulating
    in the log domain), reports the probability mass within `radius` of
    each minimizer, and compares the mass ratios against the closed-form
    limit weights a_i = p(x_i*) det(hess h(x_i*))^(-1/2).
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    log_p = np.asarray(log_p, dtype=float).ravel()
    if log_p.size != grid.shape[0]:
        raise ValueError("log_p/grid length mismatch")
    hvals, _ = h.eval_grad_batch(grid)
    logw = log_p - beta * hvals
    m = logw.max()
    if not np.isfinite(m):
        raise ValueError("all grid weights vanish; accumulate in the log domain "
                         "with a finite log_p grid")
    probs = np.exp(logw - m)
    probs /= probs.sum()

    minimizers = [np.asarray(mm, dtype=float).ravel() for mm in minimizers]
    masses = []
    predicted = []
    for x_star in minimizers:
        dist = np.linalg.norm(grid - x_star, axis=1)
        near = dist <= radius
        masses.append(float(probs[near].sum()))
        # p(x*) from the nearest lattice point's log_p
        j = int(np.argmin(dist))
        H = hessian_fd(h, x_star)
        det = float(np.linalg.det(H))
        if det <= 0:
            raise ValueError(f"non-positive-definite Hessian at minimizer {x_star}")
        predicted.append(math.exp(log_p[j]) / math.sqrt(det))
    total_pred = sum(predicted)
    predicted = [a / total_pred for a in predicted]
    return {
        "beta": beta,
        "probs": probs,
        "masses": masses,
        "predicted_weights": predicted,
    }

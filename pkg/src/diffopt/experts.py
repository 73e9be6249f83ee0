"""Composable experts: a diffusion prior, Boltzmann densities of
objectives, and soft linear-constraint penalties. Each expert exposes a
log-density gradient in raw coordinates; log-density values are
available where the underlying model permits (energy-mode prior,
objectives, hinge penalties)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import (
    DiffusionModel,
    StandardizeTransform,
    TrainingDivergedError,
    energy_at_batch,
    score_at_batch,
)
from .ndmath import (
    MlpSpec,
    OptimizerState,
    ParamSet,
    mlp_apply_batch,
    mlp_backprop_batch,
    mlp_init,
    optimizer_step,
)

__all__ = [
    "Objective",
    "BraninObjective",
    "QuadraticObjective",
    "SurrogateObjective",
    "Halfspace",
    "Expert",
    "prior_expert",
    "boltzmann_expert",
    "hinge_constraint_expert",
    "branin_eval_grad",
    "surrogate_train",
    "expert_grad",
    "expert_grad_batch",
    "expert_log_density",
    "expert_log_density_batch",
    "product_grad",
]


# --- objectives -----------------------------------------------------------

_BRANIN_A = 1.0
_BRANIN_B = 5.1 / (4 * math.pi**2)
_BRANIN_C = 5.0 / math.pi
_BRANIN_R = 6.0
_BRANIN_S = 10.0
_BRANIN_T = 1.0 / (8 * math.pi)

BRANIN_MINIMIZERS = (
    np.array([-math.pi, 12.275]),
    np.array([math.pi, 2.275]),
    np.array([9.42478, 2.475]),
)
BRANIN_MIN_VALUE = 0.397887


def branin_eval_grad(x) -> tuple[float, np.ndarray]:
    """Branin value and analytic gradient."""
    x1, x2 = float(x[0]), float(x[1])
    inner = x2 - _BRANIN_B * x1**2 + _BRANIN_C * x1 - _BRANIN_R
    value = _BRANIN_A * inner**2 + _BRANIN_S * (1 - _BRANIN_T) * math.cos(x1) + _BRANIN_S
    d_inner_dx1 = -2 * _BRANIN_B * x1 + _BRANIN_C
    g1 = 2 * _BRANIN_A * inner * d_inner_dx1 - _BRANIN_S * (1 - _BRANIN_T) * math.sin(x1)
    g2 = 2 * _BRANIN_A * inner
    return value, np.array([g1, g2])


class Objective:
    """Callable objective with value and gradient in raw coordinates."""

    dim: int

    def eval_grad(self, x) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def value(self, x) -> float:
        return self.eval_grad(x)[0]

    def grad(self, x) -> np.ndarray:
        return self.eval_grad(x)[1]

    def eval_grad_batch(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        vals = np.empty(X.shape[0])
        grads = np.empty_like(X)
        for i in range(X.shape[0]):
            vals[i], grads[i] = self.eval_grad(X[i])
        return vals, grads


class BraninObjective(Objective):
    dim = 2

    def eval_grad(self, x):
        return branin_eval_grad(x)

    def eval_grad_batch(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        x1, x2 = X[:, 0], X[:, 1]
        inner = x2 - _BRANIN_B * x1**2 + _BRANIN_C * x1 - _BRANIN_R
        vals = _BRANIN_A * inner**2 + _BRANIN_S * (1 - _BRANIN_T) * np.cos(x1) + _BRANIN_S
        g1 = 2 * _BRANIN_A * inner * (-2 * _BRANIN_B * x1 + _BRANIN_C) \
            - _BRANIN_S * (1 - _BRANIN_T) * np.sin(x1)
        g2 = 2 * _BRANIN_A * inner
        return vals, np.stack([g1, g2], axis=1)


class QuadraticObjective(Objective):
    """0.5 * scale * ||x - center||^2; test convenience."""

    def __init__(self, center, scale: float = 1.0):
        self.center = np.asarray(center, dtype=float)
        self.scale = float(scale)
        self.dim = self.center.size

    def eval_grad(self, x):
        d = np.asarray(x, dtype=float) - self.center
        return 0.5 * self.scale * float(d @ d), self.scale * d

    def eval_grad_batch(self, X):
        D = np.atleast_2d(np.asarray(X, dtype=float)) - self.center
        return 0.5 * self.scale * np.sum(D * D, axis=1), self.scale * D


class ShiftedObjective(Objective):
    """h(x) + c; gradients unchanged."""

    def __init__(self, base: Objective, offset: float):
        self.base = base
        self.offset = float(offset)
        self.dim = base.dim

    def eval_grad(self, x):
        v, g = self.base.eval_grad(x)
        return v + self.offset, g


class SurrogateObjective(Objective):
    """Feedforward regressor evaluated and differentiated in raw x space."""

    def __init__(self, spec: MlpSpec, params: ParamSet,
                 x_transform: StandardizeTransform, y_mean: float, y_std: float):
        self.spec = spec
        self.params = params
        self.x_transform = x_transform
        self.y_mean = float(y_mean)
        self.y_std = float(y_std)
        self.dim = spec.x_width

    def eval_grad(self, x):
        vals, grads = self.eval_grad_batch(np.asarray(x, dtype=float)[None, :])
        return float(vals[0]), grads[0]

    def eval_grad_batch(self, X):
        Z = self.x_transform.forward(np.atleast_2d(np.asarray(X, dtype=float)))
        out = mlp_apply_batch(self.params, self.spec, Z)
        _, ig = mlp_backprop_batch(self.params, self.spec, Z, None,
                                   np.ones((Z.shape[0], 1)))
        vals = self.y_mean + self.y_std * out[:, 0]
        grads = self.y_std * ig / self.x_transform.std
        return vals, grads

    def to_json(self) -> dict:
        return {
            "spec": self.spec.to_json(),
            "params": self.params.to_flat().tolist(),
            "x_transform": self.x_transform.to_json(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
        }

    @staticmethod
    def from_json(d: dict) -> "SurrogateObjective":
        spec = MlpSpec.from_json(d["spec"])
        return SurrogateObjective(
            spec=spec,
            params=ParamSet.from_flat(np.array(d["params"]), spec),
            x_transform=StandardizeTransform.from_json(d["x_transform"]),
            y_mean=d["y_mean"],
            y_std=d["y_std"],
        )


@dataclass(frozen=True)
class SurrogateTrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 0.001
    seed: int = 0


def surrogate_train(labeled, spec: MlpSpec, config: SurrogateTrainConfig) -> SurrogateObjective:
    """Fit a feedforward regressor to (x, y) pairs by mean squared error.

    Inputs and labels are standardized internally; the returned objective
    maps back to raw space, chain-ruling gradients through the transform.
    """
    xs = np.array([np.asarray(x, dtype=float) for x, _ in labeled])
    ys = np.array([float(y) for _, y in labeled])
    if xs.shape[0] == 0:
        raise ValueError("empty dataset")
    if xs.shape[0] < 2 * config.batch_size:
        raise ValueError("need at least 2 * batch_size labeled samples")
    if spec.out_width != 1:
        raise ValueError("surrogate network must have a single output")
    x_tr = StandardizeTransform.fit(xs)
    y_mean = float(ys.mean())
    y_std = float(max(ys.std(), 1e-8))
    Z = x_tr.forward(xs)
    Y = (ys - y_mean) / y_std

    rng = np.random.default_rng(config.seed)
    params = mlp_init(spec, seed=int(rng.integers(2**31)))
    state = OptimizerState.fresh(params.to_flat().size, learning_rate=config.learning_rate)
    n = Z.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n - config.batch_size + 1, config.batch_size):
            idx = order[start : start + config.batch_size]
            pred = mlp_apply_batch(params, spec, Z[idx])[:, 0]
            resid = pred - Y[idx]
            loss = float(np.mean(resid**2))
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite surrogate loss at epoch {epoch}")
            U = (2.0 / len(idx)) * resid[:, None]
            grads, _ = mlp_backprop_batch(params, spec, Z[idx], None, U)
            params, state = optimizer_step(params, grads, state, spec)
    return SurrogateObjective(spec, params, x_tr, y_mean, y_std)


# --- constraints ----------------------------------------------------------

@dataclass(frozen=True)
class Halfspace:
    """Linear constraint a . x <= b."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        a = np.asarray(self.normal, dtype=float)
        object.__setattr__(self, "normal", a)
        object.__setattr__(self, "offset", float(self.offset))
        if np.linalg.norm(a) == 0:
            raise ValueError("halfspace normal must be nonzero")

    def violation(self, x) -> float:
        return max(0.0, float(self.normal @ np.asarray(x, dtype=float)) - self.offset)

    def satisfied(self, x) -> bool:
        return float(self.normal @ np.asarray(x, dtype=float)) <= self.offset


# Appendix-style linear constraints for the Branin benchmark:
# x2 <= 1.5 x1 + 7.5 and x2 <= -1.5 x1 + 15.
BRANIN_HALFSPACES = (
    Halfspace(np.array([-1.5, 1.0]), 7.5),
    Halfspace(np.array([1.5, 1.0]), 15.0),
)


# --- experts --------------------------------------------------------------

@dataclass
class Expert:
    """One factor of the product target. kind selects the payload:

    prior            -- model: DiffusionModel
    boltzmann        -- objective: Objective, beta
    hinge_constraint -- halfspaces: list[Halfspace], beta_prime
    """

    kind: str
    model: DiffusionModel | None = None
    objective: Objective | None = None
    beta: float = 1.0
    halfspaces: tuple = ()
    beta_prime: float = 1.0

    def __post_init__(self):
        if self.kind not in ("prior", "boltzmann", "hinge_constraint"):
            raise ValueError(f"unknown expert kind {self.kind!r}")
        if self.kind == "prior" and self.model is None:
            raise ValueError("prior expert needs a model")
        if self.kind == "boltzmann":
            if self.objective is None:
                raise ValueError("boltzmann expert needs an objective")
            if self.beta <= 0:
                raise ValueError("beta must be positive")
        if self.kind == "hinge_constraint":
            if not self.halfspaces:
                raise ValueError("hinge expert needs halfspaces")
            if self.beta_prime <= 0:
                raise ValueError("beta_prime must be positive")

    @property
    def has_log_density(self) -> bool:
        if self.kind == "prior":
            return self.model.mode == "energy"
        return True


def prior_expert(model: DiffusionModel) -> Expert:
    return Expert(kind="prior", model=model)


def boltzmann_expert(objective: Objective, beta: float) -> Expert:
    return Expert(kind="boltzmann", objective=objective, beta=beta)


def hinge_constraint_expert(halfspaces, beta_prime: float) -> Expert:
    return Expert(kind="hinge_constraint", halfspaces=tuple(halfspaces),
                  beta_prime=beta_prime)


def expert_grad_batch(e: Expert, X, beta_override: float | None = None) -> np.ndarray:
    """Gradient of the expert's log density at raw-space points (n, d).

    beta_override substitutes the inverse temperature of a boltzmann
    expert (used by the sampler's annealing schedule); other kinds
    ignore it.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if e.kind == "prior":
        Z = e.model.transform.forward(X)
        return score_at_batch(e.model, Z, 0.0) / e.model.transform.std
    if e.kind == "boltzmann":
        beta = e.beta if beta_override is None else beta_override
        _, grads = e.objective.eval_grad_batch(X)
        return -beta * grads
    G = np.zeros_like(X)
    for hs in e.halfspaces:
        v = np.maximum(0.0, X @ hs.normal - hs.offset)
        G -= e.beta_prime * v[:, None] * hs.normal
    return G


def expert_grad(e: Expert, x, beta_override: float | None = None) -> np.ndarray:
    return expert_grad_batch(e, np.asarray(x, dtype=float)[None, :], beta_override)[0]


def expert_log_density_batch(e: Expert, X, beta_override: float | None = None) -> np.ndarray:
    """Unnormalized log densities of the expert at raw-space points."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if e.kind == "prior":
        Z = e.model.transform.forward(X)
        return energy_at_batch(e.model, Z, 0.0)
    if e.kind == "boltzmann":
        beta = e.beta if beta_override is None else beta_override
        vals, _ = e.objective.eval_grad_batch(X)
        return -beta * vals
    total = np.zeros(X.shape[0])
    for hs in e.halfspaces:
        total += np.maximum(0.0, X @ hs.normal - hs.offset) ** 2
    return -0.5 * e.beta_prime * total


def expert_log_density(e: Expert, x, beta_override: float | None = None) -> float:
    return float(expert_log_density_batch(e, np.asarray(x, dtype=float)[None, :],
                                          beta_override)[0])


def product_grad(experts, x, beta_override: float | None = None) -> np.ndarray:
    """Sum of expert log-density gradients (the product-of-experts score)."""
    experts = list(experts)
    if not experts:
        raise ValueError("need at least one expert")
    g = expert_grad(experts[0], x, beta_override)
    for e in experts[1:]:
        gi = expert_grad(e, x, beta_override)
        if gi.shape != g.shape:
            raise ValueError("expert dimension mismatch")
        g = g + gi
    return g

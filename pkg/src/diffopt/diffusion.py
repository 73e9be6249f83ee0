"""Variance-preserving SDE schedule, denoising score matching, and
score/energy evaluation for score- or energy-parameterized models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ndmath import (
    MlpSpec,
    OptimizerState,
    ParamSet,
    mlp_apply_batch,
    mlp_backprop_batch,
    mlp_grad_of_input_grad_batch,
    mlp_init,
    optimizer_step,
)

__all__ = [
    "NoiseSchedule",
    "StandardizeTransform",
    "DiffusionModel",
    "TrainConfig",
    "EnergyUnavailableError",
    "TrainingDivergedError",
    "vp_coeffs",
    "perturb",
    "dsm_loss_and_grads",
    "train_score",
    "score_at",
    "score_at_batch",
    "energy_at",
    "energy_at_batch",
]


class EnergyUnavailableError(ValueError):
    """Raised when an unnormalized log-density is requested from a
    score-parameterized model."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes NaN/Inf."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta VP schedule: beta_tilde(t) = noise_min + (t/T)(noise_max - noise_min),
    drift f(x,t) = -0.5 beta_tilde(t) x, volatility g(t) = sqrt(beta_tilde(t))."""

    kind: str = "vp_linear"
    noise_min: float = 0.01
    noise_max: float = 2.0
    horizon_T: float = 1.0

    def __post_init__(self):
        if self.kind != "vp_linear":
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not (0 < self.noise_min < self.noise_max):
            raise ValueError("need 0 < noise_min < noise_max")
        if self.horizon_T <= 0:
            raise ValueError("horizon must be positive")

    def beta_tilde(self, t: float) -> float:
        return self.noise_min + (t / self.horizon_T) * (self.noise_max - self.noise_min)

    def drift_coeff(self, t: float) -> float:
        """f(x,t) = drift_coeff(t) * x."""
        return -0.5 * self.beta_tilde(t)

    def g2(self, t: float) -> float:
        return self.beta_tilde(t)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "noise_min": self.noise_min,
            "noise_max": self.noise_max,
            "horizon_T": self.horizon_T,
        }

    @staticmethod
    def from_json(d: dict) -> "NoiseSchedule":
        return NoiseSchedule(
            kind=d["kind"],
            noise_min=float(d["noise_min"]),
            noise_max=float(d["noise_max"]),
            horizon_T=float(d["horizon_T"]),
        )


def vp_coeffs(schedule: NoiseSchedule, t: float) -> tuple[float, float]:
    """(alpha_t, sigma_t) of the VP perturbation kernel x_t = alpha x_0 + sigma eps."""
    T = schedule.horizon_T
    if not (0 <= t <= T * (1 + 1e-12)):
        raise ValueError(f"t={t} outside [0, {T}]")
    # alpha_t = exp(-0.5 * int_0^t beta_tilde(s) ds)
    integral = schedule.noise_min * t + 0.5 * (t**2 / T) * (schedule.noise_max - schedule.noise_min)
    alpha = math.exp(-0.5 * integral)
    sigma = math.sqrt(max(0.0, 1.0 - alpha * alpha))
    return alpha, sigma


def perturb(x0: np.ndarray, t: float, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError("x0/eps shape mismatch")
    alpha, sigma = vp_coeffs(schedule, t)
    return alpha * x0 + sigma * eps


@dataclass(frozen=True)
class StandardizeTransform:
    """Per-dimension affine map to zero mean, unit variance."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        std = np.maximum(np.asarray(self.std, dtype=float), 1e-8)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        if mean.shape != std.shape:
            raise ValueError("mean/std shape mismatch")

    @staticmethod
    def identity(dim: int) -> "StandardizeTransform":
        return StandardizeTransform(np.zeros(dim), np.ones(dim))

    @staticmethod
    def fit(data: np.ndarray) -> "StandardizeTransform":
        data = np.asarray(data, dtype=float)
        return StandardizeTransform(data.mean(axis=0), data.std(axis=0))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @staticmethod
    def from_json(d: dict) -> "StandardizeTransform":
        return StandardizeTransform(np.array(d["mean"]), np.array(d["std"]))


@dataclass
class DiffusionModel:
    """A trained score or energy model over standardized coordinates."""

    spec: MlpSpec
    params: ParamSet
    schedule: NoiseSchedule
    mode: str  # score | energy
    transform: StandardizeTransform
    t_min: float = 1e-3
    loss_history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.mode not in ("score", "energy"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.spec.out_width != self.spec.x_width:
            raise ValueError("network output width must equal data dimension")

    @property
    def dim(self) -> int:
        return self.spec.x_width

    def to_json(self) -> dict:
        return {
            "spec": self.spec.to_json(),
            "mode": self.mode,
            "schedule": self.schedule.to_json(),
            "transform": self.transform.to_json(),
            "params": self.params.to_flat().tolist(),
            "t_min": self.t_min,
        }

    @staticmethod
    def from_json(d: dict) -> "DiffusionModel":
        spec = MlpSpec.from_json(d["spec"])
        return DiffusionModel(
            spec=spec,
            params=ParamSet.from_flat(np.array(d["params"]), spec),
            schedule=NoiseSchedule.from_json(d["schedule"]),
            mode=d["mode"],
            transform=StandardizeTransform.from_json(d["transform"]),
            t_min=float(d["t_min"]),
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 128
    learning_rate: float = 0.001
    seed: int = 0
    weighting: str = "sigma2"

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.weighting != "sigma2":
            raise ValueError(f"unknown weighting {self.weighting!r}")


def _score_batch(model: DiffusionModel, X: np.ndarray, ts) -> np.ndarray:
    """Model score at standardized points; X is (n, d)."""
    if model.mode == "score":
        return mlp_apply_batch(model.params, model.spec, X, ts)
    # energy mode: s = grad_x (-0.5 ||NN||^2) = -J^T NN
    N = mlp_apply_batch(model.params, model.spec, X, ts)
    _, ig = mlp_backprop_batch(model.params, model.spec, X, ts, N)
    return -ig


def dsm_loss_and_grads(model: DiffusionModel, batch: np.ndarray, times, epses: np.ndarray):
    """Denoising score matching loss and exact parameter gradients.

    loss = mean_n sigma_t^2 || s(x_t, t) - (-eps/sigma_t) ||^2
         = mean_n || sigma_t s(x_t, t) + eps ||^2,
    with x_t = alpha_t x_0 + sigma_t eps in standardized space.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    epses = np.atleast_2d(np.asarray(epses, dtype=float))
    times = np.atleast_1d(np.asarray(times, dtype=float))
    n = batch.shape[0]
    if epses.shape != batch.shape or times.shape != (n,):
        raise ValueError("batch/times/epses shape mismatch")
    if np.any(times < model.t_min):
        raise ValueError(f"times below t_min={model.t_min}")

    alphas = np.empty(n)
    sigmas = np.empty(n)
    for i, t in enumerate(times):
        alphas[i], sigmas[i] = vp_coeffs(model.schedule, float(t))
    Xt = alphas[:, None] * batch + sigmas[:, None] * epses
    target = -epses / sigmas[:, None]

    S = _score_batch(model, Xt, times)
    resid = S - target
    w = sigmas**2
    loss = float(np.mean(w * np.sum(resid**2, axis=1)))
    # d loss / d S[n] = (2 w_n / n) resid[n]
    U = (2.0 * w[:, None] / n) * resid
    if model.mode == "score":
        grads, _ = mlp_backprop_batch(model.params, model.spec, Xt, times, U)
    else:
        grads = mlp_grad_of_input_grad_batch(model.params, model.spec, Xt, times, U)
    return loss, grads


def train_score(dataset, spec: MlpSpec, schedule: NoiseSchedule, mode: str,
                config: TrainConfig, t_min: float = 1e-3) -> DiffusionModel:
    """Fit a diffusion model to a dataset by denoising score matching."""
    data = np.atleast_2d(np.asarray(dataset, dtype=float))
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    if data.shape[0] < config.batch_size:
        raise ValueError("dataset smaller than batch size")
    transform = StandardizeTransform.fit(data)
    Z = transform.forward(data)

    rng = np.random.default_rng(config.seed)
    params = mlp_init(spec, seed=int(rng.integers(2**31)))
    model = DiffusionModel(spec=spec, params=params, schedule=schedule,
                           mode=mode, transform=transform, t_min=t_min)
    state = OptimizerState.fresh(params.to_flat().size, learning_rate=config.learning_rate)

    n = Z.shape[0]
    T = schedule.horizon_T
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n - config.batch_size + 1, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = Z[idx]
            tb = rng.uniform(t_min, T, size=len(idx))
            eb = rng.standard_normal(xb.shape)
            loss, grads = dsm_loss_and_grads(model, xb, tb, eb)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}")
            model.params, state = optimizer_step(model.params, grads, state, spec)
            epoch_loss += loss
            n_batches += 1
        losses.append(epoch_loss / max(1, n_batches))
    model.loss_history = losses
    return model


def score_at(model: DiffusionModel, x: np.ndarray, t: float) -> np.ndarray:
    """Score in standardized coordinates, t clamped to >= t_min."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim,):
        raise ValueError(f"expected x of shape ({model.dim},)")
    t = min(max(float(t), model.t_min), model.schedule.horizon_T)
    return _score_batch(model, x[None, :], [t])[0]


def score_at_batch(model: DiffusionModel, X: np.ndarray, t: float) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = min(max(float(t), model.t_min), model.schedule.horizon_T)
    return _score_batch(model, X, np.full(X.shape[0], t))


def energy_at(model: DiffusionModel, x: np.ndarray, t: float) -> float:
    """Unnormalized log-density E(x,t) = -0.5 ||NN(x,t)||^2; energy mode only."""
    x = np.asarray(x, dtype=float)
    return float(energy_at_batch(model, x[None, :], t)[0])


def energy_at_batch(model: DiffusionModel, X: np.ndarray, t: float) -> np.ndarray:
    if model.mode != "energy":
        raise EnergyUnavailableError("energy unavailable for score-mode model")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = min(max(float(t), model.t_min), model.schedule.horizon_T)
    N = mlp_apply_batch(model.params, model.spec, X, np.full(X.shape[0], t))
    return -0.5 * np.sum(N * N, axis=1)

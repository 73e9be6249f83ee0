"""Two-stage sampler: annealed guided reverse diffusion for warm-up,
then (optionally Metropolis-adjusted) Langevin dynamics on the product
of the diffusion prior and the objective/constraint experts.

Stage I integrates the reverse VP SDE with an extra drift term pulling
toward low objective values, ramped by an inverse-temperature schedule.
Stage II runs ULA or MALA on the product target at a fixed inverse
temperature. Both stages work in standardized coordinates; objective
gradients are evaluated in raw space and chain-ruled across.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import DiffusionModel, energy_at_batch, score_at_batch
from .experts import (
    expert_grad_batch,
    expert_log_density,
    expert_log_density_batch,
    product_grad,
)

__all__ = [
    "BetaSchedule",
    "SamplerConfig",
    "SampleSet",
    "ChainsDivergedError",
    "beta_at",
    "stage1_run",
    "ula_step",
    "mala_step",
    "sample",
]


class ChainsDivergedError(RuntimeError):
    """Raised when every chain hit a non-finite state."""


@dataclass(frozen=True)
class BetaSchedule:
    """Inverse-temperature ramp over the warm-up stage, as a function of
    the reverse-diffusion time tau (tau = T at the start, 0 at the end)."""

    kind: str = "constant"  # constant | linear | exponential | reciprocal
    beta_max: float = 1.0
    rate: float = 100.0  # exponential only
    beta0: float = 100.0  # reciprocal only

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "exponential", "reciprocal"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.beta_max < 0:
            raise ValueError("beta_max must be nonnegative")
        if self.rate <= 0 or self.beta0 <= 0:
            raise ValueError("rate and beta0 must be positive")

    def to_json(self) -> dict:
        return {"kind": self.kind, "beta_max": self.beta_max,
                "rate": self.rate, "beta0": self.beta0}

    @staticmethod
    def from_json(d: dict) -> "BetaSchedule":
        return BetaSchedule(
            kind=d["kind"],
            beta_max=float(d.get("beta_max", 1.0)),
            rate=float(d.get("rate", 100.0)),
            beta0=float(d.get("beta0", 100.0)),
        )


def beta_at(schedule: BetaSchedule, tau: float, T: float) -> float:
    """Inverse temperature at reverse time tau in [0, T]."""
    if not (0 <= tau <= T * (1 + 1e-12)):
        raise ValueError(f"tau={tau} outside [0, {T}]")
    if schedule.kind == "constant":
        return schedule.beta_max
    if schedule.kind == "linear":
        return schedule.beta_max * (T - tau) / T
    if schedule.kind == "exponential":
        return schedule.beta_max * (1.0 - math.exp(-schedule.rate * (T - tau)))
    # reciprocal: beta(t) = 1/t for t > 1/beta0 else 0, with t = T - tau
    t = T - tau
    return 1.0 / t if t > 1.0 / schedule.beta0 else 0.0


@dataclass(frozen=True)
class SamplerConfig:
    stage1_steps: int = 1000
    stage1_dt: float = 0.001
    stage2_steps: int = 0
    stage2_dt: float = 0.0001
    stage2_beta: float = 5.0
    schedule: BetaSchedule = field(default_factory=BetaSchedule)
    use_mh: bool = False
    num_chains: int = 1
    seed: int = 0
    record_every: int = 0  # 0 = final states only
    grad_clip: float = 1e3  # stage-I guidance norm ceiling, standardized units

    def __post_init__(self):
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValueError("step counts must be nonnegative")
        if self.stage1_dt <= 0 or self.stage2_dt <= 0:
            raise ValueError("step sizes must be positive")
        if self.num_chains < 1:
            raise ValueError("need at least one chain")
        if self.record_every < 0:
            raise ValueError("record_every must be nonnegative")

    def to_json(self) -> dict:
        return {
            "stage1_steps": self.stage1_steps,
            "stage1_dt": self.stage1_dt,
            "stage2_steps": self.stage2_steps,
            "stage2_dt": self.stage2_dt,
            "stage2_beta": self.stage2_beta,
            "beta_schedule": self.schedule.to_json(),
            "use_mh": self.use_mh,
            "num_chains": self.num_chains,
            "seed": self.seed,
            "record_every": self.record_every,
            "grad_clip": self.grad_clip,
        }

    @staticmethod
    def from_json(d: dict) -> "SamplerConfig":
        return SamplerConfig(
            stage1_steps=int(d["stage1_steps"]),
            stage1_dt=float(d["stage1_dt"]),
            stage2_steps=int(d["stage2_steps"]),
            stage2_dt=float(d["stage2_dt"]),
            stage2_beta=float(d["stage2_beta"]),
            schedule=BetaSchedule.from_json(d["beta_schedule"]),
            use_mh=bool(d["use_mh"]),
            num_chains=int(d["num_chains"]),
            seed=int(d["seed"]),
            record_every=int(d.get("record_every", 0)),
            grad_clip=float(d.get("grad_clip", 1e3)),
        )


@dataclass
class SampleSet:
    """Final chain states (raw space) plus optional per-step snapshots."""

    final_points: np.ndarray
    trajectories: list  # (chain, step, stage, point) tuples, raw space
    acceptance_rate: float | None
    diverged_chains: list
    config: SamplerConfig
    seed: int


# --- single-point Langevin steps (raw space, test and small-run API) ------

def ula_step(x, experts, dt: float, rng: np.random.Generator,
             beta_override: float | None = None, z: np.ndarray | None = None):
    """One unadjusted Langevin step on the product of experts."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    g = product_grad(experts, x, beta_override)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite product gradient")
    if z is None:
        z = rng.standard_normal(x.shape)
    return x + g * dt + math.sqrt(2 * dt) * z


def mala_step(x, experts, dt: float, rng: np.random.Generator,
              beta_override: float | None = None):
    """One Metropolis-adjusted Langevin step; returns (x', accepted)."""
    experts = list(experts)
    for e in experts:
        if not e.has_log_density:
            raise ValueError("MH correction requires log densities for all experts "
                             "(energy-mode prior)")
    x = np.asarray(x, dtype=float)
    z = rng.standard_normal(x.shape)
    u = rng.uniform()
    gx = product_grad(experts, x, beta_override)
    prop = x + gx * dt + math.sqrt(2 * dt) * z
    log_acc = _mala_log_acceptance(x, prop, gx, experts, dt, beta_override)
    if log_acc > math.log(u):
        return prop, True
    return x, False


def _mala_log_acceptance(x, prop, gx, experts, dt, beta_override):
    # Proposal is N(x + dt g(x), 2 dt Id), so the log-density exponent is
    # -||r||^2 / (4 dt): the residual difference divides by 4 dt, not 2 dt.
    lp_x = sum(expert_log_density(e, x, beta_override) for e in experts)
    lp_prop = sum(expert_log_density(e, prop, beta_override) for e in experts)
    g_prop = product_grad(experts, prop, beta_override)
    lq_rev = -float(np.sum((x - prop - dt * g_prop) ** 2))
    lq_fwd = -float(np.sum((prop - x - dt * gx) ** 2))
    return (lp_prop - lp_x) + (lq_rev - lq_fwd) / (4 * dt)


# --- vectorized internals (standardized space, batched over chains) -------

def _split_experts(experts):
    objectives = []
    for e in experts:
        if e.kind == "prior":
            raise ValueError("pass the prior via the model argument, not the expert list")
        objectives.append(e)
    return objectives


def _objective_grad_std(experts, Z_std, transform, beta_override):
    """Sum of expert log-density gradients, chain-ruled to standardized
    coordinates, for a batch of standardized points."""
    G = np.zeros_like(Z_std)
    if not experts:
        return G
    X_raw = transform.inverse(Z_std)
    for e in experts:
        G += expert_grad_batch(e, X_raw, beta_override)
    return G * transform.std


def _clip_rows(G: np.ndarray, ceiling: float) -> np.ndarray:
    norms = np.linalg.norm(G, axis=1)
    scale = np.ones_like(norms)
    mask = norms > ceiling
    scale[mask] = ceiling / norms[mask]
    return G * scale[:, None]


def _run_stage1(model: DiffusionModel, objectives, config: SamplerConfig,
                X0: np.ndarray, noise: np.ndarray, recorder=None):
    """Euler-Maruyama integration of the guided reverse SDE in
    standardized space. Returns (end states, alive mask)."""
    sched = model.schedule
    T = sched.horizon_T
    X = X0.copy()
    alive = np.all(np.isfinite(X), axis=1)
    dt = config.stage1_dt
    for k in range(config.stage1_steps):
        tau = T - k * dt
        beta = beta_at(config.schedule, min(tau, T), T)
        f_coef = sched.drift_coeff(tau)
        g2 = sched.g2(tau)
        S = score_at_batch(model, X, tau)
        G = _objective_grad_std(objectives, X, model.transform, beta)
        G = _clip_rows(G, config.grad_clip)
        drift = -f_coef * X + g2 * S + G
        X = X + drift * dt + math.sqrt(g2 * dt) * noise[:, k, :]
        finite = np.all(np.isfinite(X), axis=1)
        newly_dead = alive & ~finite
        if np.any(newly_dead):
            X[newly_dead] = np.nan
            alive = alive & finite
        if recorder is not None and config.record_every > 0 and (k + 1) % config.record_every == 0:
            recorder(k + 1, 1, X, alive)
    return X, alive


def _run_stage2(model: DiffusionModel, objectives, config: SamplerConfig,
                X0: np.ndarray, noise: np.ndarray, uniforms: np.ndarray,
                alive: np.ndarray, recorder=None):
    """ULA or MALA on the product target in standardized space.

    The prior enters through the score at t=0; boltzmann experts use the
    stage-2 inverse temperature.
    """
    transform = model.transform
    beta2 = config.stage2_beta
    dt = config.stage2_dt
    X = X0.copy()
    n = X.shape[0]
    accepted = 0
    proposals = 0

    def grad_std(Xb):
        S = score_at_batch(model, Xb, 0.0)
        return S + _objective_grad_std(objectives, Xb, transform, beta2)

    def logp_std(Xb):
        vals = energy_at_batch(model, Xb, 0.0)
        X_raw = transform.inverse(Xb)
        for e in objectives:
            vals = vals + expert_log_density_batch(e, X_raw, beta2)
        return vals

    for k in range(config.stage2_steps):
        idx = np.where(alive)[0]
        if idx.size == 0:
            break
        Xa = X[idx]
        Ga = grad_std(Xa)
        prop = Xa + Ga * dt + math.sqrt(2 * dt) * noise[idx, k, :]
        if config.use_mh:
            lp_x = logp_std(Xa)
            lp_p = logp_std(prop)
            Gp = grad_std(prop)
            lq_rev = -np.sum((Xa - prop - dt * Gp) ** 2, axis=1)
            lq_fwd = -np.sum((prop - Xa - dt * Ga) ** 2, axis=1)
            log_acc = (lp_p - lp_x) + (lq_rev - lq_fwd) / (4 * dt)
            acc = log_acc > np.log(uniforms[idx, k])
            Xa = np.where(acc[:, None], prop, Xa)
            accepted += int(acc.sum())
            proposals += idx.size
        else:
            Xa = prop
        X[idx] = Xa
        finite = np.all(np.isfinite(X), axis=1)
        newly_dead = alive & ~finite
        if np.any(newly_dead):
            X[newly_dead] = np.nan
            alive = alive & finite
        if recorder is not None and config.record_every > 0 and (k + 1) % config.record_every == 0:
            recorder(k + 1, 2, X, alive)
    return X, alive, (accepted, proposals)


# Chains are processed in independent blocks to bound the memory of the
# pregenerated per-chain noise streams; results are identical for any
# block size because every chain consumes only its own stream.
_CHAIN_BLOCK = 2048


def stage1_run(model: DiffusionModel, objectives, config: SamplerConfig):
    """Warm-up stage only; returns (standardized end states, alive mask)."""
    objectives = _split_experts(objectives)
    _check_config(model, config, require_stage1=True)
    d = model.dim
    X_out = np.empty((config.num_chains, d))
    alive_out = np.empty(config.num_chains, dtype=bool)
    for lo in range(0, config.num_chains, _CHAIN_BLOCK):
        hi = min(lo + _CHAIN_BLOCK, config.num_chains)
        rngs = [np.random.default_rng(np.random.SeedSequence([int(config.seed), i]))
                for i in range(lo, hi)]
        X0 = np.stack([r.standard_normal(d) for r in rngs])
        noise = np.stack([r.standard_normal((config.stage1_steps, d)) for r in rngs])
        X_out[lo:hi], alive_out[lo:hi] = _run_stage1(model, objectives, config, X0, noise)
    return X_out, alive_out


def _check_config(model: DiffusionModel, config: SamplerConfig, require_stage1=False):
    T = model.schedule.horizon_T
    if config.stage1_steps > 0:
        if abs(config.stage1_steps * config.stage1_dt - T) > 1e-9:
            raise ValueError(
                f"stage1_steps * stage1_dt = {config.stage1_steps * config.stage1_dt} "
                f"must equal the schedule horizon T = {T}")
    elif require_stage1:
        raise ValueError("stage1_steps must be positive")
    if config.use_mh and model.mode != "energy":
        raise ValueError("MH requires energy model")


def sample(model: DiffusionModel, objectives, config: SamplerConfig) -> SampleSet:
    """Full two-stage run; returns raw-space samples.

    stage1_steps = 0 skips the warm-up (chains start at N(0, Id) in
    standardized space); stage2_steps = 0 skips the Langevin correction.
    """
    objectives = _split_experts(objectives)
    _check_config(model, config)
    for e in objectives:
        if config.use_mh and not e.has_log_density:
            raise ValueError("MH correction requires log densities for all experts")

    d = model.dim
    X_all = np.empty((config.num_chains, d))
    alive_all = np.empty(config.num_chains, dtype=bool)
    trajectories = []
    accepted_total = 0
    proposals_total = 0

    for lo in range(0, config.num_chains, _CHAIN_BLOCK):
        hi = min(lo + _CHAIN_BLOCK, config.num_chains)
        rngs = [np.random.default_rng(np.random.SeedSequence([int(config.seed), i]))
                for i in range(lo, hi)]
        X0 = np.stack([r.standard_normal(d) for r in rngs])
        noise1 = np.stack([r.standard_normal((config.stage1_steps, d)) for r in rngs])
        noise2 = np.stack([r.standard_normal((config.stage2_steps, d)) for r in rngs])
        unif2 = np.stack([r.uniform(size=config.stage2_steps) for r in rngs])

        def recorder(step, stage, X, alive, _lo=lo):
            for i in np.where(alive)[0]:
                trajectories.append((int(_lo + i), int(step), int(stage),
                                     model.transform.inverse(X[i])))

        alive = np.ones(hi - lo, dtype=bool)
        X = X0
        if config.record_every > 0:
            recorder(0, 0, X, alive)
        if config.stage1_steps > 0:
            X, alive = _run_stage1(model, objectives, config, X, noise1, recorder)
        X, alive, stats = _run_stage2(model, objectives, config, X, noise2, unif2,
                                      alive, recorder)
        accepted_total += stats[0]
        proposals_total += stats[1]
        X_all[lo:hi] = X
        alive_all[lo:hi] = alive

    if not np.any(alive_all):
        raise ChainsDivergedError("every chain diverged to a non-finite state")
    finals = model.transform.inverse(X_all[alive_all])
    rate = (accepted_total / proposals_total) if proposals_total > 0 else None
    return SampleSet(
        final_points=finals,
        trajectories=trajectories,
        acceptance_rate=rate,
        diverged_chains=[int(i) for i in np.where(~alive_all)[0]],
        config=config,
        seed=config.seed,
    )

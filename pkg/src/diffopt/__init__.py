"""Optimization under unknown constraints by sampling from the product
of a diffusion-learned data density and Boltzmann densities of
objectives, via guided reverse diffusion followed by Langevin/MALA
correction."""

from .diffusion import (
    DiffusionModel,
    NoiseSchedule,
    StandardizeTransform,
    TrainConfig,
    train_score,
)
from .experts import (
    BraninObjective,
    Expert,
    Halfspace,
    QuadraticObjective,
    SurrogateObjective,
    boltzmann_expert,
    branin_eval_grad,
    hinge_constraint_expert,
    prior_expert,
    surrogate_train,
)
from .ndmath import MlpSpec, ParamSet, TimeInput
from .sampler import BetaSchedule, SampleSet, SamplerConfig, sample

__all__ = [
    "BetaSchedule",
    "BraninObjective",
    "DiffusionModel",
    "Expert",
    "Halfspace",
    "MlpSpec",
    "NoiseSchedule",
    "ParamSet",
    "QuadraticObjective",
    "SampleSet",
    "SamplerConfig",
    "StandardizeTransform",
    "SurrogateObjective",
    "TimeInput",
    "TrainConfig",
    "boltzmann_expert",
    "branin_eval_grad",
    "hinge_constraint_expert",
    "prior_expert",
    "sample",
    "surrogate_train",
    "train_score",
]

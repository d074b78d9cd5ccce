"""Composing pretrained primitive policies with an attention-weighted Gaussian mixture."""
from .composer import Composer, MixtureDistribution, compose_act, gumbel_weights, mixture_log_prob, mixture_sample
from .ensemble import Ensemble, GaussianAction, make_scripted_primitives, strip_goal
from .envs import ENV_REGISTRY, make_env
from .harness import ExperimentConfig, ablate, run_experiment
from .hiro import HiroConfig, HiroTrainer, hiro_train
from .sac import SacConfig, SacTrainer, sac_train

__all__ = [
    "Composer", "MixtureDistribution", "compose_act", "gumbel_weights", "mixture_log_prob", "mixture_sample",
    "Ensemble", "GaussianAction", "make_scripted_primitives", "strip_goal", "ENV_REGISTRY", "make_env",
    "ExperimentConfig", "ablate", "run_experiment", "HiroConfig", "HiroTrainer", "hiro_train",
    "SacConfig", "SacTrainer", "sac_train",
]
__version__ = "0.1.0"

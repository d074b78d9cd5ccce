"""scikit-learn style wrapper around a composite-policy training run.

``fit`` trains on the named environment, ``predict`` maps an observation
matrix to noise-free actions and ``score`` runs evaluation episodes.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .harness import ExperimentConfig, build_trainer, evaluate
from .numerics import no_grad


class CompositePolicyEstimator(BaseEstimator):
    """Train a composite policy with SAC or HIRO and expose it as an estimator.

    Parameters
    ----------
    env : registered environment name.
    algo : ``"sac"`` or ``"hiro"``.
    variant : composer variant.
    steps : environment steps used by ``fit``.
    seed : master seed for every random stream.
    eval_episodes : episodes per ``score`` call.
    sac_params, hiro_params : overrides for the trainer configs.
    """

    def __init__(self, env="point_random_goal", algo="sac", variant="full", steps=10_000, seed=0,
                 eval_episodes=10, sac_params=None, hiro_params=None):
        self.env = env
        self.algo = algo
        self.variant = variant
        self.steps = steps
        self.seed = seed
        self.eval_episodes = eval_episodes
        self.sac_params = sac_params
        self.hiro_params = hiro_params

    def _config(self) -> ExperimentConfig:
        return ExperimentConfig(env=self.env, algo=self.algo, variant=self.variant, seed=self.seed,
                                steps=self.steps, eval_episodes=self.eval_episodes,
                                sac=dict(self.sac_params or {}), hiro=dict(self.hiro_params or {})).validate()

    def fit(self, X=None, y=None):
        """Train from scratch for ``steps`` environment steps.  ``X`` and ``y`` are ignored."""
        cfg = self._config()
        trainer = build_trainer(cfg)
        trainer.train(cfg.steps)
        self.trainer_ = trainer
        self.n_features_in_ = trainer.env.spec.obs_dim
        self.training_log_ = list(trainer.log)
        return self

    def _check_obs(self, X) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict(self, X) -> np.ndarray:
        """Noise-free action for each observation row (HIRO proposes a fresh subgoal per row)."""
        X = self._check_obs(X)
        out = []
        for obs in X:
            policy = self.trainer_.eval_policy()
            policy.reset()
            out.append(policy(obs))
        return np.asarray(out)

    def predict_weights(self, X) -> np.ndarray:
        """Deterministic mixture weights over the primitives (SAC, ``full`` variant only)."""
        X = self._check_obs(X)
        if self.algo != "sac":
            raise ValueError("mixture weights are only exposed for the SAC composer")
        tr = self.trainer_
        if tr.nets.policy.variant != "full":
            raise ValueError(f"variant {tr.nets.policy.variant!r} does not produce mixture weights")
        pm, ps = tr.primitives(X)
        with no_grad():
            _, _, dist = tr.nets.policy.act(X, pm, ps, mode="deterministic")
        return dist.weights.data.copy()

    def score(self, X=None, y=None) -> float:
        """One minus the mean normalized final distance over ``eval_episodes`` episodes."""
        check_is_fitted(self, "trainer_")
        rows = evaluate(self.trainer_, self.env, self.eval_episodes, np.random.default_rng(self.seed),
                        self.trainer_.total_steps)
        return float(1.0 - np.mean([r["normalized_distance"] for r in rows]))

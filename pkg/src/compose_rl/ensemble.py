"""Primitive policies and the ordered ensemble handed to the composer.

Primitives only ever see the goal-free part of the state.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nets import Mlp, load_module
from .numerics import no_grad

SIGMA_FRACTION = 0.1

FAMILIES = {
    "nav": (("left", (-1.0, 0.0)), ("right", (1.0, 0.0)), ("up", (0.0, 1.0)), ("down", (0.0, -1.0))),
    "pusher": (("push-left", (-1.0, 0.0)), ("push-down", (0.0, -1.0))),
    "hurdle": (("run-forward", (1.0, 0.0)), ("jump", (0.0, 1.0))),
}


@dataclass(frozen=True)
class GaussianAction:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.shape != sigma.shape or mu.ndim != 1:
            raise ValueError(f"mu shape {mu.shape} and sigma shape {sigma.shape} must be equal 1-D")
        if np.any(sigma <= 0) or not np.all(np.isfinite(mu)):
            raise ValueError("sigma must be positive and mu finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def action_dim(self) -> int:
        return self.mu.shape[0]


class PrimitivePolicy:
    """A goal-agnostic Gaussian policy over the shared action space."""

    name: str
    state_dim: int
    action_dim: int

    def act(self, s_hat: np.ndarray) -> GaussianAction:
        raise NotImplementedError

    def _check(self, s_hat) -> np.ndarray:
        s_hat = np.asarray(s_hat, dtype=np.float64)
        if s_hat.shape != (self.state_dim,):
            raise ValueError(f"primitive {self.name!r} expects state width {self.state_dim}, got shape {s_hat.shape}")
        return s_hat


class ScriptedPrimitive(PrimitivePolicy):
    """Constant-mean Gaussian, e.g. 'move right at full speed'."""

    def __init__(self, name: str, mu, sigma, state_dim: int):
        self.name = name
        self._action = GaussianAction(mu, sigma)
        self.state_dim = state_dim
        self.action_dim = self._action.action_dim

    def act(self, s_hat):
        self._check(s_hat)
        return self._action


class MlpPrimitive(PrimitivePolicy):
    """Primitive backed by a Gaussian-head :class:`~compose_rl.nets.Mlp`."""

    def __init__(self, name: str, net: Mlp):
        if net.head != "gaussian":
            raise ValueError("primitive nets need a gaussian head")
        self.name = name
        self.net = net
        self.state_dim = net.in_width
        self.action_dim = net.out_width

    def act(self, s_hat):
        s_hat = self._check(s_hat)
        with no_grad():
            mu, sigma = self.net.forward(s_hat)
        return GaussianAction(mu.data.copy(), sigma.data.copy())


def load_primitive(name: str, widths: Sequence[int], bin_path, manifest_path, activation="relu") -> MlpPrimitive:
    """Load an externally trained primitive stored in the nets binary format."""
    net = Mlp(widths, np.random.default_rng(0), activation=activation, head="gaussian")
    load_module(net, bin_path, manifest_path)
    return MlpPrimitive(name, net)


class Ensemble:
    """Ordered primitive set; index ``i`` lines up with mixture weight ``w_i``."""

    def __init__(self, members: Sequence[PrimitivePolicy]):
        members = tuple(members)
        if not members:
            raise ValueError("an ensemble needs at least one primitive")
        dims = {m.action_dim for m in members}
        if len(dims) != 1:
            raise ValueError(f"primitives disagree on action dimension: {sorted(dims)}")
        self.members = members
        self.action_dim = dims.pop()
        self.state_dim = members[0].state_dim

    def __len__(self) -> int:
        return len(self.members)

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.members]

    def act(self, s_hat) -> list[GaussianAction]:
        return ensemble_act(self, s_hat)

    def act_arrays(self, s_hat) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(mu, sigma)``, each shaped ``(..., len(self), action_dim)``.

        Leading batch axes of ``s_hat`` are evaluated row by row.
        """
        s_hat = np.asarray(s_hat, dtype=np.float64)
        if s_hat.ndim > 1:
            rows = [self.act_arrays(r) for r in s_hat.reshape(-1, s_hat.shape[-1])]
            tail = (len(self), self.action_dim)
            return (np.stack([r[0] for r in rows]).reshape(s_hat.shape[:-1] + tail),
                    np.stack([r[1] for r in rows]).reshape(s_hat.shape[:-1] + tail))
        acts = self.act(s_hat)
        return np.stack([a.mu for a in acts]), np.stack([a.sigma for a in acts])

    def permuted(self, order: Sequence[int]) -> "Ensemble":
        return Ensemble([self.members[i] for i in order])


def ensemble_act(ensemble: Ensemble, s_hat) -> list[GaussianAction]:
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s_hat.shape != (ensemble.state_dim,):
        raise ValueError(f"ensemble expects state width {ensemble.state_dim}, got shape {s_hat.shape}")
    return [m.act(s_hat) for m in ensemble.members]


def strip_goal(s, s_hat_width: int) -> np.ndarray:
    """Drop the goal suffix of ``s = [s_hat, g]`` (works on batches too)."""
    if s_hat_width <= 0:
        raise ValueError(f"primitive state width must be positive, got {s_hat_width}")
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] < s_hat_width:
        raise ValueError(f"state of width {s.shape[-1]} is shorter than primitive width {s_hat_width}")
    return s[..., :s_hat_width]


def make_scripted_primitives(family: str, state_dim: int, action_low, action_high) -> Ensemble:
    """Directional constant-velocity primitives for one environment family."""
    if family not in FAMILIES:
        raise ValueError(f"unknown primitive family {family!r}; known families: {sorted(FAMILIES)}")
    low = np.asarray(action_low, dtype=np.float64)
    high = np.asarray(action_high, dtype=np.float64)
    sigma = SIGMA_FRACTION * (high - low)
    members = []
    for name, direction in FAMILIES[family]:
        d = np.asarray(direction)
        mu = np.where(d > 0, d * high, np.where(d < 0, -d * low, 0.0))
        members.append(ScriptedPrimitive(name, mu, sigma, state_dim))
    return Ensemble(members)

"""Attention-weighted Gaussian-mixture composition of primitive policies.

The full composer embeds each primitive's ``(mu, sigma)`` pair, runs the
sequence through a bidirectional LSTM, decodes ``[h_f, h_b, s]`` to a context
vector ``h`` and scores every primitive with

    q_i = w . tanh(W_f h^f_i + W_b h^b_i + W_d h)

The mixture weights are ``softmax((q + gumbel) / T)`` (no noise in
deterministic mode) and the composite policy is ``sum_i w_i N(mu_i, sigma_i)``.

Two ablations and a flat baseline share the same interface; each returns a
one-component mixture built from its own Gaussian head.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .ensemble import GaussianAction
from .nets import BiRnn, Mlp, Module, _uniform
from .numerics import ShapeError, Tensor

VARIANTS = ("full", "no_attention", "att_brnn_removed", "flat_baseline")
SIGMA_FLOOR = 1e-4
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class MixtureDistribution:
    """Diagonal Gaussian mixture; leading axes are batch axes.

    ``log_weights`` has shape ``(..., K)``; ``mu`` and ``sigma`` have shape
    ``(..., K, A)``.
    """

    log_weights: Tensor
    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ShapeError(f"mu shape {self.mu.shape} vs sigma shape {self.sigma.shape}")
        if self.log_weights.shape != self.mu.shape[:-1]:
            raise ShapeError(f"weights shape {self.log_weights.shape} vs components shape {self.mu.shape}")

    @classmethod
    def from_arrays(cls, weights, mu, sigma) -> "MixtureDistribution":
        with np.errstate(divide="ignore"):
            logw = np.log(np.asarray(weights, dtype=np.float64))
        return cls(Tensor(logw), Tensor(mu), Tensor(sigma))

    @classmethod
    def from_components(cls, weights, components: Sequence[GaussianAction]) -> "MixtureDistribution":
        return cls.from_arrays(weights, np.stack([c.mu for c in components]),
                               np.stack([c.sigma for c in components]))

    @property
    def weights(self) -> Tensor:
        return nx.exp(self.log_weights)

    @property
    def n_components(self) -> int:
        return self.mu.shape[-2]

    @property
    def action_dim(self) -> int:
        return self.mu.shape[-1]

    def mean(self) -> Tensor:
        w = nx.reshape(self.weights, self.log_weights.shape + (1,))
        return nx.sum(w * self.mu, axis=-2)

    def permuted(self, order: Sequence[int]) -> "MixtureDistribution":
        order = list(order)
        return MixtureDistribution(self.log_weights[..., order], self.mu[..., order, :], self.sigma[..., order, :])


@dataclass
class PolicyNoise:
    """Frozen randomness for one composite-policy evaluation."""

    gumbel: np.ndarray    # (..., K)
    uniform: np.ndarray   # (...,)
    eps: np.ndarray       # (..., K, A)

    @classmethod
    def draw(cls, rng: np.random.Generator, batch_shape: tuple, n_components: int, action_dim: int,
             gumbel_rng: np.random.Generator | None = None) -> "PolicyNoise":
        batch_shape = tuple(batch_shape)
        return cls(gumbel=(gumbel_rng or rng).gumbel(size=batch_shape + (n_components,)),
                   uniform=rng.random(size=batch_shape),
                   eps=rng.standard_normal(size=batch_shape + (n_components, action_dim)))


def gumbel_weights(q, temperature: float, mode: str = "deterministic", rng: np.random.Generator | None = None,
                   gumbel: np.ndarray | None = None, log: bool = False) -> Tensor:
    """Mixture weights ``softmax((q + G) / T)``; ``G = 0`` in deterministic mode.

    With ``log=True`` the log-weights are returned instead (computed stably).
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    q = nx.as_tensor(q)
    if mode == "stochastic":
        if gumbel is None:
            if rng is None:
                raise ValueError("stochastic mode needs an rng or explicit gumbel noise")
            gumbel = rng.gumbel(size=q.shape)
        z = (q + gumbel) * (1.0 / temperature)
    elif mode == "deterministic":
        z = q * (1.0 / temperature)
    else:
        raise ValueError(f"unknown mode {mode!r}; expected 'stochastic' or 'deterministic'")
    return nx.log_softmax(z) if log else nx.softmax(z)


def mixture_log_prob(dist: MixtureDistribution, a) -> Tensor:
    """``log sum_i w_i prod_j N(a_j; mu_ij, sigma_ij)`` via log-sum-exp."""
    a = nx.as_tensor(a)
    if a.shape[-1] != dist.action_dim:
        raise ShapeError(f"action shape {a.shape} vs mixture action dim {dist.action_dim}")
    a = nx.reshape(a, a.shape[:-1] + (1, a.shape[-1]))
    sig = nx.clip(dist.sigma, SIGMA_FLOOR, np.inf)
    z = (a - dist.mu) / sig
    comp = nx.sum(-0.5 * nx.square(z) - nx.log(sig), axis=-1) - HALF_LOG_2PI * dist.action_dim
    return nx.logsumexp(dist.log_weights + comp, axis=-1)


def mixture_sample(dist: MixtureDistribution, rng: np.random.Generator | None = None,
                   noise: PolicyNoise | None = None) -> Tensor:
    """Exact mixture sample: component ``k ~ Categorical(w)``, then ``mu_k + sigma_k * eps``.

    Gradients reach ``mu``/``sigma`` of the chosen component only; the
    discrete choice carries none.  The sample is not clipped.
    """
    batch = dist.log_weights.shape[:-1]
    if noise is None:
        if rng is None:
            raise ValueError("mixture_sample needs an rng or explicit noise")
        noise = PolicyNoise.draw(rng, batch, dist.n_components, dist.action_dim)
    cdf = np.cumsum(np.exp(dist.log_weights.data), axis=-1)
    k = (cdf < np.asarray(noise.uniform)[..., None] * cdf[..., -1:]).sum(axis=-1)
    k = np.minimum(k, dist.n_components - 1)
    onehot = (np.arange(dist.n_components) == k[..., None]).astype(np.float64)
    comps = dist.mu + dist.sigma * noise.eps
    return nx.sum(Tensor(onehot[..., None]) * comps, axis=-2)


def relaxed_sample(dist: MixtureDistribution, noise: PolicyNoise) -> Tensor:
    """Weighted sum of reparameterized primitive draws, ``sum_i w_i (mu_i + sigma_i eps_i)``.

    With Gumbel-perturbed weights at low temperature this approaches an exact
    mixture sample while staying differentiable in the weights.
    """
    w = dist.weights
    comps = dist.mu + dist.sigma * noise.eps
    return nx.sum(nx.reshape(w, w.shape + (1,)) * comps, axis=-2)


def relaxed_log_prob(dist: MixtureDistribution, a) -> Tensor:
    """Log-density of ``a`` under the law of :func:`relaxed_sample` given the weights.

    For fixed weights the blended draw is Gaussian with mean ``sum_i w_i mu_i``
    and per-dimension variance ``sum_i w_i^2 sigma_i^2``.
    """
    a = nx.as_tensor(a)
    if a.shape[-1] != dist.action_dim:
        raise ShapeError(f"action shape {a.shape} vs mixture action dim {dist.action_dim}")
    w = dist.weights
    w = nx.reshape(w, w.shape + (1,))
    mean = nx.sum(w * dist.mu, axis=-2)
    var = nx.sum(nx.square(w) * nx.square(nx.clip(dist.sigma, SIGMA_FLOOR, np.inf)), axis=-2)
    return nx.sum(-0.5 * nx.square(a - mean) / var - 0.5 * nx.log(var), axis=-1) - HALF_LOG_2PI * dist.action_dim


def clip_action(a, low, high) -> np.ndarray:
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    return np.clip(a, low, high)


class Composer(Module):
    """Composite policy over a fixed-size primitive ensemble.

    ``variant`` selects the architecture: ``full`` (encoder, decoder and
    attention), ``no_attention`` (decoder emits a Gaussian from the encoder's
    last states), ``att_brnn_removed`` (feed-forward on state and raw primitive
    parameters) or ``flat_baseline`` (plain Gaussian policy on the state).
    Single-Gaussian heads squash their mean with ``tanh`` onto
    ``[-action_scale, action_scale]``.
    """

    def __init__(self, state_dim: int, action_dim: int, n_primitives: int, rng: np.random.Generator,
                 variant: str = "full", hidden: int = 128, decoder_hidden: int = 128,
                 temperature: float = 0.5, baseline_hidden: int = 256, action_scale: float = 1.0):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown composer variant {variant!r}; expected one of {VARIANTS}")
        if not temperature > 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        if n_primitives < 1:
            raise ValueError("need at least one primitive")
        self.variant = variant
        self.state_dim, self.action_dim = state_dim, action_dim
        self.n_primitives = n_primitives
        self.hidden = d = hidden
        self.temperature = temperature
        self.action_scale = float(action_scale)
        A, S, K = action_dim, state_dim, n_primitives
        if variant in ("full", "no_attention"):
            self.add_param("embed_W", _uniform(rng, 2 * A, (2 * A, d)))
            self.add_param("embed_b", _uniform(rng, 2 * A, (d,)))
            self.encoder = self.add_child("encoder", BiRnn(d, d, rng))
        if variant == "full":
            self.decoder = self.add_child("decoder", Mlp([2 * d + S, decoder_hidden, d], rng))
            self.add_param("W_f", _uniform(rng, d, (d, d)))
            self.add_param("W_b", _uniform(rng, d, (d, d)))
            self.add_param("W_d", _uniform(rng, d, (d, d)))
            self.add_param("w", _uniform(rng, d, (d,)))
        elif variant == "no_attention":
            self.decoder = self.add_child("decoder", Mlp([2 * d + S, decoder_hidden, A], rng, head="gaussian"))
        elif variant == "att_brnn_removed":
            self.net = self.add_child("net", Mlp([S + 2 * A * K, decoder_hidden, A], rng, head="gaussian"))
        else:
            self.net = self.add_child("net", Mlp([S, baseline_hidden, baseline_hidden, A], rng, head="gaussian"))

    @property
    def n_components(self) -> int:
        return self.n_primitives if self.variant == "full" else 1

    # ---------------------------------------------------------------- pieces

    def encode(self, prim_mu, prim_sigma, frozen: bool = False):
        """Run the encoder over the primitives; returns ``(hf, hb, hf_last, hb_last)``.

        When every batch row carries the same primitive outputs (e.g. scripted
        primitives) the encoder runs once and broadcasts.
        """
        pm, ps = np.asarray(prim_mu, dtype=np.float64), np.asarray(prim_sigma, dtype=np.float64)
        if pm.shape[-2] != self.n_primitives:
            raise ShapeError(f"expected {self.n_primitives} primitive actions, got shape {pm.shape}")
        if pm.ndim > 2:
            flat_m, flat_s = pm.reshape(-1, *pm.shape[-2:]), ps.reshape(-1, *ps.shape[-2:])
            if np.all(flat_m == flat_m[:1]) and np.all(flat_s == flat_s[:1]):
                pm, ps = flat_m[:1], flat_s[:1]
        x = nx.linear(np.concatenate([pm, ps], axis=-1), self._p("embed_W", frozen), self._p("embed_b", frozen))
        return self.encoder.forward(x, frozen)

    def attention_logits(self, hf_states, hb_states, h, frozen: bool = False) -> Tensor:
        """Scores ``q_i`` for stacked per-primitive states ``(..., K, d)`` and context ``h``."""
        Hf, Hb = nx.as_tensor(hf_states), nx.as_tensor(hb_states)
        if Hf.shape[-2] != self.n_primitives or Hb.shape[-2] != self.n_primitives:
            raise ShapeError(f"{Hf.shape[-2]}/{Hb.shape[-2]} encoder states for {self.n_primitives} primitives")
        h = nx.as_tensor(h)
        ctx = h @ self._p("W_d", frozen).T
        pre = Hf @ self._p("W_f", frozen).T + Hb @ self._p("W_b", frozen).T + nx.reshape(ctx, ctx.shape[:-1] + (1, ctx.shape[-1]))
        return nx.tanh(pre) @ self._p("w", frozen)

    def logits(self, s, prim_mu, prim_sigma, frozen: bool = False) -> Tensor:
        s = nx.as_tensor(s)
        hf, hb, hf_last, hb_last = self.encode(prim_mu, prim_sigma, frozen)
        ctx_in = _concat_broadcast([hf_last, hb_last, s])
        h = self.decoder.forward(ctx_in, frozen)
        return self.attention_logits(hf[..., 1:, :], hb[..., :-1, :], h, frozen)

    # ------------------------------------------------------------- interface

    def distribution(self, s, prim_mu, prim_sigma, mode: str = "deterministic",
                     noise: PolicyNoise | None = None, rng: np.random.Generator | None = None,
                     frozen: bool = False) -> MixtureDistribution:
        s = nx.as_tensor(s)
        if s.shape[-1] != self.state_dim:
            raise ShapeError(f"composer expects state width {self.state_dim}, got shape {s.shape}")
        prim_mu = np.asarray(prim_mu, dtype=np.float64)
        prim_sigma = np.asarray(prim_sigma, dtype=np.float64)
        batch = s.shape[:-1]
        if self.variant == "full":
            q = self.logits(s, prim_mu, prim_sigma, frozen)
            gumbel = None if noise is None else noise.gumbel
            logw = gumbel_weights(q, self.temperature, mode, rng=rng, gumbel=gumbel, log=True)
            shape = batch + (self.n_primitives, self.action_dim)
            return MixtureDistribution(logw, Tensor(np.broadcast_to(prim_mu, shape)),
                                       Tensor(np.broadcast_to(prim_sigma, shape)))
        if self.variant == "no_attention":
            _, _, hf_last, hb_last = self.encode(prim_mu, prim_sigma, frozen)
            mu, sigma = self.decoder.forward(_concat_broadcast([hf_last, hb_last, s]), frozen)
        elif self.variant == "att_brnn_removed":
            flat = np.concatenate([prim_mu, prim_sigma], axis=-1).reshape(prim_mu.shape[:-2] + (-1,))
            flat = np.broadcast_to(flat, batch + flat.shape[-1:])
            mu, sigma = self.net.forward(nx.concat([s, Tensor(flat)], axis=-1), frozen)
        else:
            mu, sigma = self.net.forward(s, frozen)
        # keep the Gaussian mean inside the action box; the density stays Gaussian
        mu = nx.tanh(mu) * self.action_scale
        one = mu.shape[:-1] + (1, self.action_dim)
        return MixtureDistribution(Tensor(np.zeros(mu.shape[:-1] + (1,))), nx.reshape(mu, one), nx.reshape(sigma, one))

    def act(self, s, prim_mu, prim_sigma, mode: str = "stochastic", rng: np.random.Generator | None = None,
            noise: PolicyNoise | None = None, frozen: bool = False):
        """Composite action, its log-probability and the mixture it came from.

        Stochastic mode blends reparameterized primitive draws with
        Gumbel-perturbed weights and scores the blend with its own Gaussian
        density; deterministic mode returns the mixture mean under noise-free
        weights, scored by the mixture density.
        """
        s = nx.as_tensor(s)
        if mode == "stochastic" and noise is None:
            if rng is None:
                raise ValueError("stochastic mode needs an rng or explicit noise")
            noise = PolicyNoise.draw(rng, s.shape[:-1], self.n_components, self.action_dim)
        dist = self.distribution(s, prim_mu, prim_sigma, mode=mode, noise=noise, frozen=frozen)
        if mode == "stochastic":
            action = relaxed_sample(dist, noise)
            return action, relaxed_log_prob(dist, action), dist
        action = dist.mean()
        return action, mixture_log_prob(dist, action), dist


def compose_act(composer: Composer, s, primitive_actions, mode: str = "stochastic",
                rng: np.random.Generator | None = None, noise: PolicyNoise | None = None):
    """Convenience wrapper taking a list of :class:`GaussianAction` or ``(mu, sigma)`` arrays."""
    if isinstance(primitive_actions, (list, tuple)) and primitive_actions and isinstance(primitive_actions[0], GaussianAction):
        prim_mu = np.stack([p.mu for p in primitive_actions])
        prim_sigma = np.stack([p.sigma for p in primitive_actions])
    else:
        prim_mu, prim_sigma = primitive_actions
    return composer.act(s, prim_mu, prim_sigma, mode=mode, rng=rng, noise=noise)


def _concat_broadcast(parts: list) -> Tensor:
    parts = [nx.as_tensor(p) for p in parts]
    batch = np.broadcast_shapes(*(p.shape[:-1] for p in parts))
    parts = [p if p.shape[:-1] == batch else nx.broadcast_to(p, batch + p.shape[-1:]) for p in parts]
    return nx.concat(parts, axis=-1)

"""Small random instances shared by the loss tests."""
from __future__ import annotations

import numpy as np

from compose_rl.composer import PolicyNoise
from compose_rl.hiro import HiroConfig, build_hiro_nets
from compose_rl.sac import SacConfig, build_sac_nets

from . import oracles

S, A, K, B = 3, 2, 2, 3
TINY = dict(encoder_hidden=3, decoder_hidden=4, baseline_hidden=4)


def sac_instance(rng: np.random.Generator, variant: str = "full"):
    cfg = SacConfig(critic_hidden=4, variant=variant, gamma=float(rng.uniform(0.5, 1.0)),
                    entropy_coef=float(rng.uniform(0.0, 1.0)), **TINY)
    nets = build_sac_nets(S, A, K, cfg, rng)
    for p in nets.value_target.parameters():
        p.data += rng.normal(scale=0.1, size=p.shape)
    batch = {"s": rng.normal(size=(B, S)), "a": rng.uniform(-1, 1, size=(B, A)), "r": rng.normal(size=B),
             "s2": rng.normal(size=(B, S)), "done": rng.integers(0, 2, size=B).astype(float),
             "pm": rng.uniform(-1, 1, size=(B, K, A)), "ps": rng.uniform(0.1, 0.5, size=(B, K, A))}
    noise = PolicyNoise.draw(rng, (B,), nets.policy.n_components, A)
    return cfg, nets, batch, noise


def sac_params(nets) -> dict:
    return {name: oracles.params_of(m) for name, m in nets.modules().items()}


def hiro_instance(rng: np.random.Generator):
    G = 2
    cfg = HiroConfig(low_critic_hidden=4, high_hidden=4, gamma=float(rng.uniform(0.5, 1.0)), **TINY)
    low, high = np.array([-2.5, -2.5]), np.array([2.5, 2.5])
    nets = build_hiro_nets(S + G, S, A, K, cfg, low, high, rng)
    for name, m in nets.modules().items():
        if name.endswith("target"):
            for p in m.parameters():
                p.data += rng.normal(scale=0.1, size=p.shape)
    lo_batch = {"s": rng.normal(size=(B, S + G)), "a": rng.uniform(-1, 1, size=(B, A)), "r": rng.normal(size=B),
                "s2": rng.normal(size=(B, S + G)), "done": rng.integers(0, 2, size=B).astype(float),
                "pm": rng.uniform(-1, 1, size=(B, K, A)), "ps": rng.uniform(0.1, 0.5, size=(B, K, A)),
                "pm2": rng.uniform(-1, 1, size=(B, K, A)), "ps2": rng.uniform(0.1, 0.5, size=(B, K, A))}
    hi_batch = {"s": rng.normal(size=(B, S + G)), "g": rng.uniform(-2.5, 2.5, size=(B, G)),
                "R": rng.normal(size=B) * 5, "s_next": rng.normal(size=(B, S + G)),
                "done": rng.integers(0, 2, size=B).astype(float)}
    lo_noise = rng.standard_normal((B, A)) * 2
    hi_noise = rng.standard_normal((B, G)) * 2
    return cfg, nets, lo_batch, hi_batch, lo_noise, hi_noise, low, high


def as_lists(batch: dict) -> dict:
    return {k: np.asarray(v).tolist() for k, v in batch.items()}

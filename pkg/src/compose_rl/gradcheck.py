"""Finite-difference audit of every trainable loss on small random instances."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .composer import Composer, PolicyNoise, mixture_log_prob
from .ensemble import make_scripted_primitives
from .envs import make_env
from .hiro import HiroConfig, HiroTrainer, high_actor_loss, high_q_loss, low_actor_loss, low_q_loss
from .numerics import GradCheckReport, finite_difference_check
from .sac import SacConfig, SacTrainer, policy_loss, q_loss, value_loss

SMALL = dict(encoder_hidden=5, decoder_hidden=6, baseline_hidden=6)


def _composer_checks(rng, tol) -> list[tuple[str, GradCheckReport]]:
    S, A, K, B = 4, 2, 3, 5
    comp = Composer(S, A, K, rng, hidden=5, decoder_hidden=6)
    s = rng.normal(size=(B, S))
    pm = rng.normal(size=(B, K, A))
    ps = rng.uniform(0.2, 1.0, size=(B, K, A))
    a = rng.normal(size=(B, A))
    noise = PolicyNoise.draw(rng, (B,), K, A)
    proj = rng.normal(size=(B, K))

    def logp():
        dist = comp.distribution(s, pm, ps, mode="stochastic", noise=noise)
        return nx.sum(mixture_log_prob(dist, a))

    def logits():
        return nx.sum(comp.logits(s, pm, ps) * proj)

    return [("mixture_log_prob", finite_difference_check(logp, comp.parameters(), tol=tol)),
            ("attention_logits", finite_difference_check(logits, comp.parameters(), tol=tol))]


def _sac_checks(seed, tol) -> list[tuple[str, GradCheckReport]]:
    out = []
    env = make_env("point_random_goal")
    ens = make_scripted_primitives("nav", 2, env.spec.action_low, env.spec.action_high)
    for variant in ("full", "no_attention", "att_brnn_removed", "flat_baseline"):
        cfg = SacConfig(warmup_steps=20, batch_size=6, critic_hidden=6, variant=variant, **SMALL)
        tr = SacTrainer(env, ens, cfg, seed)
        tr.train(30)
        batch = tr.replay.sample(6)
        p, nets = tr.nets.policy, tr.nets
        noise = PolicyNoise.draw(np.random.default_rng(seed), (6,), p.n_components, p.action_dim)
        out.append((f"sac.value_loss[{variant}]",
                    finite_difference_check(lambda: value_loss(batch, nets, cfg, noise=noise),
                                            nets.value.parameters(), tol=tol)))
        out.append((f"sac.q_loss[{variant}]",
                    finite_difference_check(lambda: q_loss(batch, nets, cfg),
                                            nets.q1.parameters() + nets.q2.parameters(), tol=tol)))
        out.append((f"sac.policy_loss[{variant}]",
                    finite_difference_check(lambda: policy_loss(batch, nets, cfg, noise=noise),
                                            p.parameters(), tol=tol)))
    return out


def _hiro_checks(seed, tol) -> list[tuple[str, GradCheckReport]]:
    env = make_env("point_umaze")
    ens = make_scripted_primitives("nav", 2, env.spec.action_low, env.spec.action_high)
    cfg = HiroConfig(warmup_steps=20, batch_size=6, c=3, low_critic_hidden=6, high_hidden=6, **SMALL)
    tr = HiroTrainer(env, ens, cfg, seed)
    tr.train(40)
    nets = tr.nets
    rng = np.random.default_rng(seed)
    low = tr.low_replay.sample(6)
    high = tr.high_replay.sample(6)
    ln = rng.standard_normal((6, 2))
    hn = rng.standard_normal((6, 2))
    lo, hi = tr.action_low, tr.action_high
    return [
        ("hiro.low_q_loss", finite_difference_check(lambda: low_q_loss(low, nets, cfg, lo, hi, noise=ln),
                                                    nets.low_q1.parameters() + nets.low_q2.parameters(), tol=tol)),
        ("hiro.low_actor_loss", finite_difference_check(lambda: low_actor_loss(low, nets),
                                                        nets.low.parameters(), tol=tol)),
        ("hiro.high_q_loss", finite_difference_check(lambda: high_q_loss(high, nets, cfg, noise=hn),
                                                     nets.high_q1.parameters() + nets.high_q2.parameters(), tol=tol)),
        ("hiro.high_actor_loss", finite_difference_check(lambda: high_actor_loss(high, nets),
                                                         nets.high.parameters(), tol=tol)),
    ]


def run_gradient_checks(seed: int = 0, tol: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    """Named reports for the composer chain and every SAC/HIRO loss."""
    rng = np.random.default_rng(seed)
    return _composer_checks(rng, tol) + _sac_checks(seed, tol) + _hiro_checks(seed, tol)

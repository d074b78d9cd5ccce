"""Soft actor-critic for the composite policy.

Per gradient step: value net on ``min(Q1, Q2) - log pi``, twin Q nets on the
Bellman target through the Polyak-averaged value net, then the policy on
``lambda * log pi - min(Q1, Q2)`` with reparameterized actions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .composer import Composer, PolicyNoise
from .ensemble import Ensemble, strip_goal
from .envs import PointEnv
from .nets import Mlp, Module, polyak_update
from .numerics import Adam, Tensor, no_grad
from .replay import ReplayBuffer
from .seeding import make_streams


class NumericalFailure(RuntimeError):
    """A loss went non-finite; ``snapshot`` holds the diagnostic state."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class SacConfig:
    learning_rate: float = 3e-4
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 256
    replay_capacity: int = 1_000_000
    target_update_interval: int = 1
    gradient_steps: int = 1
    entropy_coef: float = 0.2
    reward_scale: float = 1.0
    episode_limit: int = 0
    bootstrap_capture: bool = False
    warmup_steps: int = 1000
    critic_hidden: int = 256
    encoder_hidden: int = 128
    decoder_hidden: int = 128
    baseline_hidden: int = 256
    temperature: float = 0.5
    variant: str = "full"

    def validate(self) -> "SacConfig":
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.entropy_coef < 0:
            raise ValueError(f"entropy_coef must be non-negative, got {self.entropy_coef}")
        if self.reward_scale <= 0:
            raise ValueError(f"reward_scale must be positive, got {self.reward_scale}")
        if self.episode_limit < 0:
            raise ValueError(f"episode_limit must be non-negative, got {self.episode_limit}")
        if self.batch_size < 1 or self.replay_capacity < 1:
            raise ValueError("batch_size and replay_capacity must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SacConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SAC config fields: {sorted(unknown)}")
        return cls(**d).validate()

    to_dict = asdict


@dataclass
class SacNets:
    policy: Composer
    value: Mlp
    value_target: Mlp
    q1: Mlp
    q2: Mlp

    def modules(self) -> dict[str, Module]:
        return {"policy": self.policy, "value": self.value, "value_target": self.value_target,
                "q1": self.q1, "q2": self.q2}

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, m in self.modules().items():
            out.update(m.named_parameters(name + "."))
        return out


def build_sac_nets(obs_dim: int, action_dim: int, n_primitives: int, cfg: SacConfig,
                   rng: np.random.Generator) -> SacNets:
    policy = Composer(obs_dim, action_dim, n_primitives, rng, variant=cfg.variant, hidden=cfg.encoder_hidden,
                      decoder_hidden=cfg.decoder_hidden, temperature=cfg.temperature,
                      baseline_hidden=cfg.baseline_hidden)
    h = cfg.critic_hidden
    value = Mlp([obs_dim, h, h, 1], rng)
    q1 = Mlp([obs_dim + action_dim, h, h, 1], rng)
    q2 = Mlp([obs_dim + action_dim, h, h, 1], rng)
    return SacNets(policy, value, value.clone(), q1, q2)


def _col(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def _q(net: Mlp, s, a, frozen: bool = False) -> Tensor:
    return nx.reshape(net.forward(nx.concat([nx.as_tensor(s), nx.as_tensor(a)], axis=-1), frozen), (-1,))


def _check_batch(batch: dict) -> int:
    n = len(batch["s"]) if "s" in batch else 0
    if n == 0:
        raise ValueError("empty batch")
    return n


def bellman_target(r, s_next, done, nets: SacNets, cfg: SacConfig) -> np.ndarray:
    """``r + gamma * (1 - done) * V_target(s_next)``, gradient-free."""
    with no_grad():
        v_next = nets.value_target.forward(np.atleast_2d(s_next)).data.reshape(-1)
    return _col(r) + cfg.gamma * (1.0 - _col(done)) * v_next


def q_loss(batch: dict, nets: SacNets, cfg: SacConfig) -> Tensor:
    """Sum over both twins of the mean half squared Bellman error."""
    _check_batch(batch)
    target = Tensor(bellman_target(batch["r"], batch["s2"], batch["done"], nets, cfg))
    total = None
    for q in (nets.q1, nets.q2):
        err = _q(q, batch["s"], batch["a"]) - target
        loss = nx.mean(0.5 * nx.square(err))
        total = loss if total is None else total + loss
    return total


def _policy_noise(nets: SacNets, n: int, rng, noise):
    if noise is not None:
        return noise
    if rng is None:
        raise ValueError("need an rng or explicit PolicyNoise")
    p = nets.policy
    return PolicyNoise.draw(rng, (n,), p.n_components, p.action_dim)


def value_loss(batch: dict, nets: SacNets, cfg: SacConfig, rng: np.random.Generator | None = None,
               noise: PolicyNoise | None = None) -> Tensor:
    """Mean half squared residual against ``min(Q1, Q2)(s, a) - log pi(a|s)``, ``a ~ pi``."""
    n = _check_batch(batch)
    noise = _policy_noise(nets, n, rng, noise)
    with no_grad():
        a, logp, _ = nets.policy.act(batch["s"], batch["pm"], batch["ps"], mode="stochastic", noise=noise)
        qmin = np.minimum(_q(nets.q1, batch["s"], a).data, _q(nets.q2, batch["s"], a).data)
        v_hat = qmin - logp.data
    v = nx.reshape(nets.value.forward(batch["s"]), (-1,))
    return nx.mean(0.5 * nx.square(v - Tensor(v_hat)))


def policy_loss(batch: dict, nets: SacNets, cfg: SacConfig, rng: np.random.Generator | None = None,
                noise: PolicyNoise | None = None) -> Tensor:
    """``E[lambda * log pi(a|s) - min(Q1, Q2)(s, a)]`` with critics frozen."""
    n = _check_batch(batch)
    noise = _policy_noise(nets, n, rng, noise)
    a, logp, _ = nets.policy.act(batch["s"], batch["pm"], batch["ps"], mode="stochastic", noise=noise)
    qmin = nx.minimum(_q(nets.q1, batch["s"], a, frozen=True), _q(nets.q2, batch["s"], a, frozen=True))
    return nx.mean(cfg.entropy_coef * logp - qmin)


def _finite(name: str, loss: Tensor, step: int) -> None:
    if not np.isfinite(loss.data).all():
        raise NumericalFailure(f"non-finite {name} at env step {step}",
                               {"loss": name, "value": float(loss.data), "step": step})


def episode_record(step: int, ep_return: float, info: dict) -> dict:
    d0 = info.get("initial_distance", 0.0)
    d = info.get("distance", 0.0)
    return {"step": step, "episode_return": ep_return, "final_distance": d,
            "normalized_distance": d / d0 if d0 > 0 else 0.0, "success": int(bool(info.get("success", False)))}


class SacTrainer:
    """Owns nets, optimizers, replay and the rollout state of one SAC run."""

    def __init__(self, env: PointEnv, ensemble: Ensemble, cfg: SacConfig, seed: int, nets: SacNets | None = None):
        self.cfg = cfg.validate()
        self.env = env
        self.ensemble = ensemble
        self.streams = make_streams(seed)
        spec = env.spec
        if ensemble.action_dim != spec.action_dim or ensemble.state_dim != spec.s_hat_width:
            raise ValueError("ensemble and environment dimensions disagree")
        self.nets = nets or build_sac_nets(spec.obs_dim, spec.action_dim, len(ensemble), cfg, self.streams["init"])
        lr = cfg.learning_rate
        self.opt_value = Adam(self.nets.value.parameters(), lr)
        self.opt_q = Adam(self.nets.q1.parameters() + self.nets.q2.parameters(), lr)
        self.opt_policy = Adam(self.nets.policy.parameters(), lr)
        self.replay = ReplayBuffer(cfg.replay_capacity, self.streams["replay"])
        self.total_steps = 0
        self.updates = 0
        self.obs = None
        self.ep_return = 0.0
        self.ep_steps = 0
        self.log: list[dict] = []
        self.last_losses: dict[str, float] = {}

    def optimizers(self) -> dict[str, Adam]:
        return {"value": self.opt_value, "q": self.opt_q, "policy": self.opt_policy}

    def primitives(self, obs) -> tuple[np.ndarray, np.ndarray]:
        return self.ensemble.act_arrays(strip_goal(obs, self.env.spec.s_hat_width))

    def act(self, obs, deterministic: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        pm, ps = self.primitives(obs)
        with no_grad():
            if deterministic:
                a, _, _ = self.nets.policy.act(obs, pm, ps, mode="deterministic")
            else:
                noise = PolicyNoise.draw(rng or self.streams["policy"], (), self.nets.policy.n_components,
                                         self.nets.policy.action_dim, gumbel_rng=self.streams["gumbel"])
                a, _, _ = self.nets.policy.act(obs, pm, ps, mode="stochastic", noise=noise)
        return a.data.copy()

    def eval_policy(self) -> "SacEvalPolicy":
        return SacEvalPolicy(self)

    def rollout_state(self) -> dict:
        return {"obs": None if self.obs is None else self.obs.tolist(), "ep_return": self.ep_return,
                "ep_steps": self.ep_steps, "total_steps": self.total_steps, "updates": self.updates}

    def load_rollout_state(self, st: dict) -> None:
        self.obs = None if st["obs"] is None else np.asarray(st["obs"], dtype=np.float64)
        self.ep_return = st["ep_return"]
        self.ep_steps = st["ep_steps"]
        self.total_steps = st["total_steps"]
        self.updates = st["updates"]

    def replays(self) -> dict[str, ReplayBuffer]:
        return {"main": self.replay}

    def update(self) -> None:
        cfg, nets = self.cfg, self.nets
        batch = self.replay.sample(cfg.batch_size)
        n = cfg.batch_size
        p = nets.policy

        def noise():
            return PolicyNoise.draw(self.streams["policy"], (n,), p.n_components, p.action_dim,
                                    gumbel_rng=self.streams["gumbel"])

        lv = value_loss(batch, nets, cfg, noise=noise())
        _finite("value_loss", lv, self.total_steps)
        nx.backward(lv)
        self.opt_value.step()

        lq = q_loss(batch, nets, cfg)
        _finite("q_loss", lq, self.total_steps)
        nx.backward(lq)
        self.opt_q.step()

        lp = policy_loss(batch, nets, cfg, noise=noise())
        _finite("policy_loss", lp, self.total_steps)
        nx.backward(lp)
        self.opt_policy.step()

        self.updates += 1
        if self.updates % cfg.target_update_interval == 0:
            polyak_update(nets.value_target.parameters(), nets.value.parameters(), cfg.tau)
        self.last_losses = {"value": lv.item(), "q": lq.item(), "policy": lp.item()}

    def env_step(self) -> dict | None:
        """Advance one environment step (and the scheduled gradient steps)."""
        cfg, env = self.cfg, self.env
        if self.obs is None:
            self.obs = env.reset(self.streams["env"])
            self.ep_return = 0.0
            self.ep_steps = 0
        obs = self.obs
        pm, ps = self.primitives(obs)
        if self.total_steps < cfg.warmup_steps:
            a = self.streams["explore"].uniform(env.spec.action_low, env.spec.action_high)
        else:
            a = self.act(obs)
        obs2, r, done, info = env.step(a)
        # with bootstrap_capture a capture ends the episode but the target still bootstraps from s2,
        # so a positive per-step reward near the goal does not make capturing look like a loss
        terminal = bool(info.get("captured", False)) and not cfg.bootstrap_capture
        self.replay.push(s=obs, a=a, pm=pm, ps=ps, r=r * cfg.reward_scale, s2=obs2, done=float(terminal))
        self.total_steps += 1
        self.ep_steps += 1
        self.ep_return += r
        if self.total_steps >= cfg.warmup_steps and len(self.replay) >= 1:
            for _ in range(cfg.gradient_steps):
                self.update()
        record = None
        # a training-side time limit truncates without marking the transition terminal
        if done or self.ep_steps == cfg.episode_limit:
            record = episode_record(self.total_steps, self.ep_return, info)
            self.log.append(record)
            self.obs = None
        else:
            self.obs = obs2
        return record

    def train(self, budget: int) -> list[dict]:
        for _ in range(budget):
            self.env_step()
        return self.log


class SacEvalPolicy:
    """Deterministic composite controller for evaluation episodes."""

    def __init__(self, trainer: SacTrainer):
        self.trainer = trainer

    def reset(self) -> None:
        pass

    def __call__(self, obs) -> np.ndarray:
        return self.trainer.act(obs, deterministic=True)


def sac_train(env: PointEnv, ensemble: Ensemble, nets: SacNets | None, cfg: SacConfig, seed: int,
              budget: int) -> list[dict]:
    """Run ``budget`` environment steps of SAC; returns the per-episode log."""
    return SacTrainer(env, ensemble, cfg, seed, nets).train(budget)

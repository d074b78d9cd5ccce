"""Two-level hierarchical training with a composite low-level policy.

The high level picks a relative subgoal every ``c`` steps; the low-level
composer sees ``[s_hat, g]`` and is rewarded for reaching ``s + g``.  Both
levels train TD3-style (twin critics, target smoothing, delayed actor).  Stored
high-level segments are relabeled with the subgoal that best explains the
logged low-level actions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .composer import Composer
from .ensemble import Ensemble, strip_goal
from .envs import PointEnv
from .nets import Mlp, Module, polyak_update
from .numerics import Adam, Tensor, no_grad
from .replay import ReplayBuffer
from .sac import NumericalFailure, episode_record
from .seeding import make_streams

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class HiroConfig:
    learning_rate: float = 1e-4
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 128
    replay_capacity: int = 200_000
    target_update_interval: int = 2
    c: int = 10
    n_candidates: int = 10
    subgoal_low: tuple | None = None
    subgoal_high: tuple | None = None
    high_noise: float = 0.1
    low_noise: float = 0.2
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    warmup_steps: int = 1000
    high_update_every: int = 10
    high_reward_scale: float = 1.0
    encoder_hidden: int = 128
    decoder_hidden: int = 128
    baseline_hidden: int = 256
    low_critic_hidden: int = 256
    high_hidden: int = 300
    temperature: float = 0.5
    variant: str = "full"

    def validate(self) -> "HiroConfig":
        if self.c < 1:
            raise ValueError(f"c must be at least 1, got {self.c}")
        if self.n_candidates < 2:
            raise ValueError(f"n_candidates must be at least 2, got {self.n_candidates}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.target_update_interval < 1 or self.high_update_every < 1:
            raise ValueError("update intervals must be positive")
        if self.batch_size < 1 or self.replay_capacity < 1:
            raise ValueError("batch_size and replay_capacity must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "HiroConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown HIRO config fields: {sorted(unknown)}")
        d = dict(d)
        for k in ("subgoal_low", "subgoal_high"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d).validate()

    to_dict = asdict

    def bounds(self, env: PointEnv | None = None) -> tuple[np.ndarray, np.ndarray]:
        lo = self.subgoal_low if self.subgoal_low is not None else env.spec.subgoal_low
        hi = self.subgoal_high if self.subgoal_high is not None else env.spec.subgoal_high
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError(f"bad subgoal bounds {lo} / {hi}")
        return lo, hi


# ------------------------------------------------------------ goal plumbing

def low_reward(s, g, s_next, goal_dims=None) -> np.ndarray | float:
    """``-|| s + g - s_next ||`` over the goal coordinates.

    ``s`` and ``s_next`` are full states (or already restricted to the goal
    coordinates when ``goal_dims`` is None); leading axes are batch axes.
    """
    s, g, s_next = (np.asarray(x, dtype=np.float64) for x in (s, g, s_next))
    if goal_dims is not None:
        s, s_next = s[..., list(goal_dims)], s_next[..., list(goal_dims)]
    if g.shape[-1] > s.shape[-1]:
        raise ValueError(f"goal width {g.shape[-1]} exceeds state width {s.shape[-1]}")
    out = -np.sqrt(np.sum(np.square(s + g - s_next), axis=-1))
    return float(out) if out.ndim == 0 else out


def goal_transition(s, g, s_next, goal_dims=None) -> np.ndarray:
    """``s + g - s_next``: keeps the absolute target fixed while the agent moves."""
    s, g, s_next = (np.asarray(x, dtype=np.float64) for x in (s, g, s_next))
    if goal_dims is not None:
        s, s_next = s[..., list(goal_dims)], s_next[..., list(goal_dims)]
    return s + g - s_next


# --------------------------------------------------------------------- nets

class HighPolicy(Module):
    """Deterministic subgoal proposer, ``tanh`` squashed onto the subgoal box."""

    def __init__(self, obs_dim: int, goal_dim: int, hidden: int, low, high, rng: np.random.Generator):
        super().__init__()
        self.net = self.add_child("net", Mlp([obs_dim, hidden, hidden, goal_dim], rng))
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)

    def forward(self, obs, frozen: bool = False) -> Tensor:
        center, half = 0.5 * (self.high + self.low), 0.5 * (self.high - self.low)
        return nx.tanh(self.net.forward(obs, frozen)) * half + center


@dataclass
class HiroNets:
    high: HighPolicy
    high_target: HighPolicy
    high_q1: Mlp
    high_q2: Mlp
    high_q1_target: Mlp
    high_q2_target: Mlp
    low: Composer
    low_target: Composer
    low_q1: Mlp
    low_q2: Mlp
    low_q1_target: Mlp
    low_q2_target: Mlp

    def modules(self) -> dict[str, Module]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, m in self.modules().items():
            out.update(m.named_parameters(name + "."))
        return out


def build_hiro_nets(obs_dim: int, s_hat_width: int, action_dim: int, n_primitives: int, cfg: HiroConfig,
                    low, high, rng: np.random.Generator) -> HiroNets:
    gd = len(low)
    hi = HighPolicy(obs_dim, gd, cfg.high_hidden, low, high, rng)
    hq1 = Mlp([obs_dim + gd, cfg.high_hidden, cfg.high_hidden, 1], rng)
    hq2 = Mlp([obs_dim + gd, cfg.high_hidden, cfg.high_hidden, 1], rng)
    lo = Composer(s_hat_width + gd, action_dim, n_primitives, rng, variant=cfg.variant, hidden=cfg.encoder_hidden,
                  decoder_hidden=cfg.decoder_hidden, temperature=cfg.temperature,
                  baseline_hidden=cfg.baseline_hidden)
    h = cfg.low_critic_hidden
    lq1 = Mlp([s_hat_width + gd + action_dim, h, h, 1], rng)
    lq2 = Mlp([s_hat_width + gd + action_dim, h, h, 1], rng)
    return HiroNets(hi, hi.clone(), hq1, hq2, hq1.clone(), hq2.clone(), lo, lo.clone(), lq1, lq2,
                    lq1.clone(), lq2.clone())


def _q(net: Mlp, x, a, frozen: bool = False) -> Tensor:
    return nx.reshape(net.forward(nx.concat([nx.as_tensor(x), nx.as_tensor(a)], axis=-1), frozen), (-1,))


def low_action(nets: HiroNets, s_lo, pm, ps, target: bool = False, frozen: bool = False) -> Tensor:
    """Deterministic low-level action: the composite mixture mean."""
    policy = nets.low_target if target else nets.low
    a, _, _ = policy.act(s_lo, pm, ps, mode="deterministic", frozen=frozen)
    return a


def _check_batch(batch: dict, key: str) -> int:
    n = len(batch[key]) if key in batch else 0
    if n == 0:
        raise ValueError("empty batch")
    return n


def _smooth(a: np.ndarray, scale, noise: np.ndarray, cfg: HiroConfig, low, high) -> np.ndarray:
    eps = np.clip(noise * cfg.policy_noise * scale, -cfg.noise_clip * scale, cfg.noise_clip * scale)
    return np.clip(a + eps, low, high)


def low_td_target(batch: dict, nets: HiroNets, cfg: HiroConfig, action_low, action_high,
                  noise: np.ndarray) -> np.ndarray:
    """``r + gamma (1 - done) min_j Q'_j(s', g', pi'(s', g') + clipped noise)``."""
    with no_grad():
        a2 = low_action(nets, batch["s2"], batch["pm2"], batch["ps2"], target=True).data
        half = 0.5 * (np.asarray(action_high) - np.asarray(action_low))
        a2 = _smooth(a2, half, noise, cfg, action_low, action_high)
        q = np.minimum(_q(nets.low_q1_target, batch["s2"], a2).data, _q(nets.low_q2_target, batch["s2"], a2).data)
    return np.reshape(batch["r"], -1) + cfg.gamma * (1.0 - np.reshape(batch["done"], -1)) * q


def _twin_mse(q1: Mlp, q2: Mlp, x, a, y: np.ndarray) -> Tensor:
    y = Tensor(y)
    l1 = nx.mean(nx.square(_q(q1, x, a) - y))
    l2 = nx.mean(nx.square(_q(q2, x, a) - y))
    return 0.5 * (l1 + l2)


def low_q_loss(batch: dict, nets: HiroNets, cfg: HiroConfig, action_low=(-1.0, -1.0), action_high=(1.0, 1.0),
               rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> Tensor:
    """Mean over the twin critics of their mean squared TD error.

    ``batch`` holds ``s`` (low state ``[s_hat, g]``), ``a``, ``r``, ``s2``,
    ``done`` and the primitive outputs ``pm2``/``ps2`` at ``s2``.
    """
    n = _check_batch(batch, "s")
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or explicit smoothing noise")
        noise = rng.standard_normal((n, np.shape(batch["a"])[-1]))
    y = low_td_target(batch, nets, cfg, action_low, action_high, noise)
    return _twin_mse(nets.low_q1, nets.low_q2, batch["s"], batch["a"], y)


def low_actor_loss(batch: dict, nets: HiroNets) -> Tensor:
    """``-mean Q1(s, g, pi(s, g))`` with the critic frozen."""
    _check_batch(batch, "s")
    a = low_action(nets, batch["s"], batch["pm"], batch["ps"])
    return -nx.mean(_q(nets.low_q1, batch["s"], a, frozen=True))


def high_td_target(batch: dict, nets: HiroNets, cfg: HiroConfig, noise: np.ndarray) -> np.ndarray:
    """``R + gamma (1 - done) min_j Q'_j(s_{t+c}, pi'(s_{t+c}) + clipped noise)``."""
    lo, hi = nets.high.low, nets.high.high
    with no_grad():
        g2 = nets.high_target.forward(batch["s_next"]).data
        g2 = _smooth(g2, 0.5 * (hi - lo), noise, cfg, lo, hi)
        q = np.minimum(_q(nets.high_q1_target, batch["s_next"], g2).data,
                       _q(nets.high_q2_target, batch["s_next"], g2).data)
    return np.reshape(batch["R"], -1) + cfg.gamma * (1.0 - np.reshape(batch["done"], -1)) * q


def high_q_loss(batch: dict, nets: HiroNets, cfg: HiroConfig, rng: np.random.Generator | None = None,
                noise: np.ndarray | None = None) -> Tensor:
    """High-level twin TD loss on (already relabeled) segments ``s, g, R, s_next, done``."""
    n = _check_batch(batch, "s")
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or explicit smoothing noise")
        noise = rng.standard_normal((n, len(nets.high.low)))
    y = high_td_target(batch, nets, cfg, noise)
    return _twin_mse(nets.high_q1, nets.high_q2, batch["s"], batch["g"], y)


def high_actor_loss(batch: dict, nets: HiroNets) -> Tensor:
    _check_batch(batch, "s")
    g = nets.high.forward(batch["s"])
    return -nx.mean(_q(nets.high_q1, batch["s"], g, frozen=True))


# ---------------------------------------------------------------- relabeling

class LowBehaviour:
    """Behaviour density of the low level: deterministic action plus Gaussian noise.

    ``log_prob`` is what relabeling maximizes; any object with the same
    method can stand in for it.
    """

    def __init__(self, nets: HiroNets, sigma: float):
        self.nets = nets
        self.sigma = float(sigma)

    def log_prob(self, s_lo, pm, ps, actions) -> np.ndarray:
        with no_grad():
            mean = low_action(self.nets, s_lo, pm, ps).data
        z = (np.asarray(actions) - mean) / self.sigma
        return np.sum(-0.5 * z * z - np.log(self.sigma) - HALF_LOG_2PI, axis=-1)


def relabel_candidates(segment: dict, cfg: HiroConfig, low, high, goal_dims, rng: np.random.Generator) -> np.ndarray:
    """``[g, s_{t+c} - s_t, n-2 draws around s_{t+c} - s_t]``, all clipped to the bounds."""
    dims = list(goal_dims)
    diff = np.asarray(segment["s_next"], dtype=np.float64)[dims] - np.asarray(segment["s"], dtype=np.float64)[dims]
    scale = 0.5 * (high - low)
    draws = rng.normal(diff, scale, size=(cfg.n_candidates - 2, len(dims)))
    cands = np.vstack([np.asarray(segment["g"], dtype=np.float64)[None], diff[None], draws])
    return np.clip(cands, low, high)


def score_candidates(segment: dict, candidates: np.ndarray, low_policy, ensemble: Ensemble | None,
                     s_hat_width: int, goal_dims) -> np.ndarray:
    """Summed low-level log-likelihood of the logged actions under each candidate goal."""
    states = np.asarray(segment["states"], dtype=np.float64)
    actions = np.asarray(segment["actions"], dtype=np.float64)
    n = int(segment.get("length", len(states)))
    states, actions = states[:n], actions[:n]
    if n == 0:
        raise ValueError("segment carries no low-level steps")
    if "pm" in segment and segment["pm"] is not None:
        pm, ps = np.asarray(segment["pm"])[:n], np.asarray(segment["ps"])[:n]
    elif ensemble is not None:
        pm, ps = ensemble.act_arrays(strip_goal(states, s_hat_width))
    else:
        raise ValueError("segment lacks primitive outputs and no ensemble was given")
    pos = states[:, list(goal_dims)]
    C = len(candidates)
    # goal at step k under goal_transition chaining: g_k = g_0 + pos_0 - pos_k
    goals = candidates[:, None, :] + (pos[0] - pos)[None, :, :]
    s_hat = strip_goal(states, s_hat_width)
    s_lo = np.concatenate([np.broadcast_to(s_hat, (C,) + s_hat.shape), goals], axis=-1)
    lp = low_policy.log_prob(s_lo.reshape(C * n, -1), np.broadcast_to(pm, (C,) + pm.shape).reshape((C * n,) + pm.shape[1:]),
                             np.broadcast_to(ps, (C,) + ps.shape).reshape((C * n,) + ps.shape[1:]),
                             np.broadcast_to(actions, (C,) + actions.shape).reshape(C * n, -1))
    scores = np.asarray(lp, dtype=np.float64).reshape(C, n).sum(axis=1)
    return np.where(np.isnan(scores), -np.inf, scores)


def relabel_goal(segment: dict, low_policy, ensemble: Ensemble | None, cfg: HiroConfig,
                 rng: np.random.Generator, low=None, high=None, s_hat_width: int = 2,
                 goal_dims=(0, 1)) -> np.ndarray:
    """The candidate subgoal that best explains the segment's logged actions.

    ``segment`` needs ``s``, ``g``, ``s_next``, ``states`` and ``actions``
    (plus ``length`` when padded).  Ties go to the lowest candidate index, so
    the original goal wins a tie.
    """
    for key in ("s", "g", "s_next", "states", "actions"):
        if key not in segment or segment[key] is None:
            raise ValueError(f"segment is missing its stored {key!r} sequence")
    lo, hi = (np.asarray(low, dtype=np.float64), np.asarray(high, dtype=np.float64)) if low is not None \
        else cfg.bounds()
    cands = relabel_candidates(segment, cfg, lo, hi, goal_dims, rng)
    scores = score_candidates(segment, cands, low_policy, ensemble, s_hat_width, goal_dims)
    return cands[int(np.argmax(scores))]


def relabel_goals(batch: dict, low_policy, cfg: HiroConfig, rng: np.random.Generator, low, high,
                  s_hat_width: int, goal_dims) -> np.ndarray:
    """``relabel_goal`` for every segment of a padded replay batch, scored in one policy call.

    Candidates are drawn segment by segment in batch order, so the result
    equals calling ``relabel_goal`` on each segment in turn.
    """
    lo, hi = np.asarray(low, dtype=np.float64), np.asarray(high, dtype=np.float64)
    states = np.asarray(batch["states"], dtype=np.float64)
    actions = np.asarray(batch["actions"], dtype=np.float64)
    pm, ps = np.asarray(batch["pm"], dtype=np.float64), np.asarray(batch["ps"], dtype=np.float64)
    lengths = np.asarray(batch["length"]).astype(int).reshape(-1)
    if np.any(lengths < 1):
        raise ValueError("segment carries no low-level steps")
    B, c = states.shape[:2]
    cands = np.stack([relabel_candidates({"s": batch["s"][i], "g": batch["g"][i], "s_next": batch["s_next"][i]},
                                         cfg, lo, hi, goal_dims, rng) for i in range(B)])
    C = cands.shape[1]
    pos = states[..., list(goal_dims)]
    goals = cands[:, :, None, :] + (pos[:, :1] - pos)[:, None, :, :]
    s_hat = np.broadcast_to(strip_goal(states, s_hat_width)[:, None], (B, C, c, s_hat_width))
    s_lo = np.concatenate([s_hat, goals], axis=-1).reshape(B * C * c, -1)

    def tile(x):
        return np.broadcast_to(x[:, None], (B, C) + x.shape[1:]).reshape((B * C * c,) + x.shape[2:])

    lp = np.asarray(low_policy.log_prob(s_lo, tile(pm), tile(ps), tile(actions)), dtype=np.float64).reshape(B, C, c)
    valid = (np.arange(c)[None, :] < lengths[:, None])[:, None, :]
    scores = np.where(valid, lp, 0.0).sum(axis=-1)
    scores = np.where(np.isnan(scores), -np.inf, scores)
    return cands[np.arange(B), np.argmax(scores, axis=1)]


# ------------------------------------------------------------------ trainer

def _finite(name: str, loss: Tensor, step: int) -> None:
    if not np.isfinite(loss.data).all():
        raise NumericalFailure(f"non-finite {name} at env step {step}",
                               {"loss": name, "value": float(loss.data), "step": step})


class HiroTrainer:
    """Owns both levels' nets, optimizers, replays and the rollout state."""

    def __init__(self, env: PointEnv, ensemble: Ensemble, cfg: HiroConfig, seed: int, nets: HiroNets | None = None):
        self.cfg = cfg.validate()
        self.env = env
        self.ensemble = ensemble
        spec = env.spec
        if ensemble.action_dim != spec.action_dim or ensemble.state_dim != spec.s_hat_width:
            raise ValueError("ensemble and environment dimensions disagree")
        if not spec.goal_dims:
            raise ValueError(f"environment {spec.name} exposes no goal-space coordinates")
        self.goal_dims = tuple(spec.goal_dims)
        self.low_bound, self.high_bound = cfg.bounds(env)
        if len(self.low_bound) != len(self.goal_dims):
            raise ValueError("subgoal bounds and goal dims disagree")
        self.action_low = np.asarray(spec.action_low, dtype=np.float64)
        self.action_high = np.asarray(spec.action_high, dtype=np.float64)
        self.streams = make_streams(seed)
        self.nets = nets or build_hiro_nets(spec.obs_dim, spec.s_hat_width, spec.action_dim, len(ensemble), cfg,
                                            self.low_bound, self.high_bound, self.streams["init"])
        n = self.nets
        lr = cfg.learning_rate
        self.opt_high = Adam(n.high.parameters(), lr)
        self.opt_high_q = Adam(n.high_q1.parameters() + n.high_q2.parameters(), lr)
        self.opt_low = Adam(n.low.parameters(), lr)
        self.opt_low_q = Adam(n.low_q1.parameters() + n.low_q2.parameters(), lr)
        self.low_replay = ReplayBuffer(cfg.replay_capacity, self.streams["replay"])
        self.high_replay = ReplayBuffer(cfg.replay_capacity, self.streams["replay"])
        self.behaviour = LowBehaviour(self.nets, cfg.low_noise)
        self.total_steps = 0
        self.low_updates = 0
        self.high_updates = 0
        self.obs = None
        self.goal = None
        self.segment: dict | None = None
        self.ep_return = 0.0
        self.log: list[dict] = []
        self.last_losses: dict[str, float] = {}

    def optimizers(self) -> dict[str, Adam]:
        return {"high": self.opt_high, "high_q": self.opt_high_q, "low": self.opt_low, "low_q": self.opt_low_q}

    def replays(self) -> dict[str, ReplayBuffer]:
        return {"low": self.low_replay, "high": self.high_replay}

    # -------------------------------------------------------------- acting

    def s_hat(self, obs) -> np.ndarray:
        return strip_goal(obs, self.env.spec.s_hat_width)

    def low_state(self, obs, g) -> np.ndarray:
        return np.concatenate([self.s_hat(obs), np.asarray(g, dtype=np.float64)], axis=-1)

    def propose_goal(self, obs, explore: bool) -> np.ndarray:
        if explore and self.total_steps < self.cfg.warmup_steps:
            return self.streams["explore"].uniform(self.low_bound, self.high_bound)
        with no_grad():
            g = self.nets.high.forward(np.asarray(obs, dtype=np.float64)).data.copy()
        if explore:
            scale = self.cfg.high_noise * (self.high_bound - self.low_bound)
            g = g + self.streams["policy"].normal(0.0, 1.0, size=g.shape) * scale
        return np.clip(g, self.low_bound, self.high_bound)

    def low_act(self, obs, g, explore: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pm, ps = self.ensemble.act_arrays(self.s_hat(obs))
        if explore and self.total_steps < self.cfg.warmup_steps:
            return self.streams["explore"].uniform(self.action_low, self.action_high), pm, ps
        with no_grad():
            a = low_action(self.nets, self.low_state(obs, g), pm, ps).data.copy()
        if explore:
            a = a + self.streams["policy"].normal(0.0, self.cfg.low_noise, size=a.shape)
        return np.clip(a, self.action_low, self.action_high), pm, ps

    def eval_policy(self) -> "HiroEvalPolicy":
        return HiroEvalPolicy(self)

    # ------------------------------------------------------------- updates

    def update_low(self) -> None:
        cfg, nets = self.cfg, self.nets
        batch = self.low_replay.sample(cfg.batch_size)
        noise = self.streams["policy"].standard_normal((cfg.batch_size, len(self.action_low)))
        lq = low_q_loss(batch, nets, cfg, self.action_low, self.action_high, noise=noise)
        _finite("low_q_loss", lq, self.total_steps)
        nx.backward(lq)
        self.opt_low_q.step()
        self.low_updates += 1
        self.last_losses["low_q"] = lq.item()
        if self.low_updates % cfg.target_update_interval == 0:
            la = low_actor_loss(batch, nets)
            _finite("low_actor_loss", la, self.total_steps)
            nx.backward(la)
            self.opt_low.step()
            self.last_losses["low_actor"] = la.item()
            for tgt, src in ((nets.low_target, nets.low), (nets.low_q1_target, nets.low_q1),
                             (nets.low_q2_target, nets.low_q2)):
                polyak_update(tgt.parameters(), src.parameters(), cfg.tau)

    def relabel_batch(self, batch: dict) -> dict:
        out = dict(batch)
        out["g"] = relabel_goals(batch, self.behaviour, self.cfg, self.streams["relabel"], self.low_bound,
                                 self.high_bound, self.env.spec.s_hat_width, self.goal_dims)
        return out

    def update_high(self) -> None:
        cfg, nets = self.cfg, self.nets
        batch = self.relabel_batch(self.high_replay.sample(cfg.batch_size))
        noise = self.streams["policy"].standard_normal((cfg.batch_size, len(self.goal_dims)))
        hq = high_q_loss(batch, nets, cfg, noise=noise)
        _finite("high_q_loss", hq, self.total_steps)
        nx.backward(hq)
        self.opt_high_q.step()
        self.high_updates += 1
        self.last_losses["high_q"] = hq.item()
        if self.high_updates % cfg.target_update_interval == 0:
            ha = high_actor_loss(batch, nets)
            _finite("high_actor_loss", ha, self.total_steps)
            nx.backward(ha)
            self.opt_high.step()
            self.last_losses["high_actor"] = ha.item()
            for tgt, src in ((nets.high_target, nets.high), (nets.high_q1_target, nets.high_q1),
                             (nets.high_q2_target, nets.high_q2)):
                polyak_update(tgt.parameters(), src.parameters(), cfg.tau)

    # ------------------------------------------------------------- rollout

    def _close_segment(self, s_next, done: bool) -> None:
        seg, c = self.segment, self.cfg.c
        L = len(seg["actions"])
        states = np.zeros((c,) + np.shape(seg["states"][0]))
        actions = np.zeros((c,) + np.shape(seg["actions"][0]))
        pm = np.zeros((c,) + np.shape(seg["pm"][0]))
        ps = np.ones((c,) + np.shape(seg["ps"][0]))
        states[:L], actions[:L], pm[:L], ps[:L] = seg["states"], seg["actions"], seg["pm"], seg["ps"]
        self.high_replay.push(s=seg["s"], g=seg["g"], R=seg["R"] * self.cfg.high_reward_scale,
                              s_next=np.asarray(s_next, dtype=np.float64), done=float(done), states=states,
                              actions=actions, pm=pm, ps=ps, length=L)
        self.segment = None

    def env_step(self) -> dict | None:
        cfg, env = self.cfg, self.env
        if self.obs is None:
            self.obs = env.reset(self.streams["env"])
            self.ep_return = 0.0
            self.segment = None
        obs = self.obs
        if self.segment is None:
            self.goal = self.propose_goal(obs, explore=True)
            self.segment = {"s": obs.copy(), "g": self.goal.copy(), "R": 0.0, "states": [], "actions": [],
                            "pm": [], "ps": []}
        g = self.goal
        a, pm, ps = self.low_act(obs, g, explore=True)
        obs2, r, done, info = env.step(a)
        captured = bool(info.get("captured", False))
        dims = list(self.goal_dims)
        g2 = goal_transition(obs[dims], g, obs2[dims])
        pm2, ps2 = self.ensemble.act_arrays(self.s_hat(obs2))
        self.low_replay.push(s=self.low_state(obs, g), a=a, pm=pm, ps=ps,
                             r=low_reward(obs[dims], g, obs2[dims]), s2=self.low_state(obs2, g2),
                             pm2=pm2, ps2=ps2, done=float(captured))
        seg = self.segment
        seg["states"].append(obs.copy())
        seg["actions"].append(a.copy())
        seg["pm"].append(pm)
        seg["ps"].append(ps)
        seg["R"] += r
        self.total_steps += 1
        self.ep_return += r
        if len(seg["actions"]) >= cfg.c or done:
            self._close_segment(obs2, captured)
        self.goal = g2
        if self.total_steps >= cfg.warmup_steps:
            self.update_low()
            if self.total_steps % cfg.high_update_every == 0 and len(self.high_replay) > 0:
                self.update_high()
        record = None
        if done:
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

    # ------------------------------------------------------- checkpointing

    def rollout_state(self) -> dict:
        seg = None
        if self.segment is not None:
            seg = {k: (np.asarray(v).tolist() if k != "R" else v) for k, v in self.segment.items()}
        return {"obs": None if self.obs is None else self.obs.tolist(),
                "goal": None if self.goal is None else np.asarray(self.goal).tolist(),
                "segment": seg, "ep_return": self.ep_return, "total_steps": self.total_steps,
                "low_updates": self.low_updates, "high_updates": self.high_updates}

    def load_rollout_state(self, st: dict) -> None:
        self.obs = None if st["obs"] is None else np.asarray(st["obs"], dtype=np.float64)
        self.goal = None if st["goal"] is None else np.asarray(st["goal"], dtype=np.float64)
        seg = st["segment"]
        if seg is not None:
            seg = {k: (v if k == "R" else [np.asarray(x, dtype=np.float64) for x in v] if k in
                       ("states", "actions", "pm", "ps") else np.asarray(v, dtype=np.float64)) for k, v in seg.items()}
        self.segment = seg
        self.ep_return = st["ep_return"]
        self.total_steps = st["total_steps"]
        self.low_updates = st["low_updates"]
        self.high_updates = st["high_updates"]


class HiroEvalPolicy:
    """Noise-free two-level controller for evaluation episodes."""

    def __init__(self, trainer: HiroTrainer):
        self.trainer = trainer
        self.t = 0
        self.goal = None
        self.last_obs = None

    def reset(self) -> None:
        self.t = 0
        self.goal = None

    def __call__(self, obs) -> np.ndarray:
        tr = self.trainer
        obs = np.asarray(obs, dtype=np.float64)
        if self.t % tr.cfg.c == 0:
            self.goal = tr.propose_goal(obs, explore=False)
        else:
            dims = list(tr.goal_dims)
            self.goal = goal_transition(self.last_obs[dims], self.goal, obs[dims])
        a, _, _ = tr.low_act(obs, self.goal, explore=False)
        self.t += 1
        self.last_obs = obs
        return a


def hiro_train(env: PointEnv, ensemble: Ensemble, nets: HiroNets | None, cfg: HiroConfig, seed: int,
               budget: int) -> list[dict]:
    """Run ``budget`` environment steps of hierarchical training; returns the episode log."""
    return HiroTrainer(env, ensemble, cfg, seed, nets).train(budget)

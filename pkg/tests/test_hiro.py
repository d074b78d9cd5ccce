import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from compose_rl import numerics as nx
from compose_rl.ensemble import make_scripted_primitives
from compose_rl.envs import make_env
from compose_rl.hiro import (HiroConfig, HiroTrainer, LowBehaviour, goal_transition, high_actor_loss, high_q_loss,
                             hiro_train, low_actor_loss, low_q_loss, low_reward, relabel_candidates, relabel_goal,
                             relabel_goals, score_candidates)
from compose_rl.sac import NumericalFailure

from . import oracles
from .helpers import S, as_lists, hiro_instance, sac_params

vec2 = arrays(np.float64, 2, elements=st.floats(-20, 20))


def trainer(seed=0, **kw):
    env = make_env("point_umaze")
    ens = make_scripted_primitives("nav", 2, env.spec.action_low, env.spec.action_high)
    base = dict(warmup_steps=20, batch_size=4, encoder_hidden=3, decoder_hidden=4, baseline_hidden=4,
                low_critic_hidden=6, high_hidden=6, c=5, high_update_every=5, n_candidates=4)
    base.update(kw)
    return HiroTrainer(env, ens, HiroConfig(**base), seed)


# ------------------------------------------------------------ goal plumbing

def test_low_reward_examples():
    assert low_reward([0.0, 0.0], [1.0, 0.0], [1.0, 0.0]) == 0.0
    assert low_reward([0.0, 0.0], [3.0, 4.0], [0.0, 0.0]) == pytest.approx(-5.0, abs=1e-15)
    assert low_reward([0.0, 0.0, 9.0], [1.0, 1.0], [1.0, 1.0, -9.0], goal_dims=(0, 1)) == 0.0


def test_goal_transition_example():
    np.testing.assert_array_equal(goal_transition([1.0, 1.0], [2.0, 0.0], [2.0, 1.0]), [1.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(vec2, vec2, vec2)
def test_low_reward_is_non_positive_and_zero_on_target(s, g, s_next):
    r = low_reward(s, g, s_next)
    assert r <= 0.0
    assert low_reward(s, g, s + g) == 0.0
    assert abs(r - oracles.low_reward(s.tolist(), g.tolist(), s_next.tolist())) <= 1e-10 * max(1.0, abs(r))


@settings(max_examples=200, deadline=None)
@given(vec2, vec2, vec2)
def test_goal_transition_keeps_absolute_target(s, g, s_next):
    g2 = goal_transition(s, g, s_next)
    np.testing.assert_allclose(s_next + g2, s + g, atol=1e-9)


def test_low_reward_rejects_wide_goal():
    with pytest.raises(ValueError):
        low_reward([0.0], [1.0, 2.0], [0.0])


# ------------------------------------------------------------------ losses

def test_losses_match_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        cfg, nets, lo, hi, lo_noise, hi_noise, low, high = hiro_instance(rng)
        P = sac_params(nets)
        a_low, a_high = [-1.0, -1.0], [1.0, 1.0]
        got = low_q_loss(lo, nets, cfg, a_low, a_high, noise=lo_noise).item()
        ref = oracles.low_q_loss(P, cfg.temperature, cfg.gamma, cfg.policy_noise, cfg.noise_clip, a_low, a_high,
                                 as_lists(lo), lo_noise.tolist())
        assert abs(got - ref) <= 1e-10 * max(1.0, abs(ref))
        got = low_actor_loss(lo, nets).item()
        ref = oracles.low_actor_loss(P, cfg.temperature, as_lists(lo))
        assert abs(got - ref) <= 1e-10 * max(1.0, abs(ref))
        got = high_q_loss(hi, nets, cfg, noise=hi_noise).item()
        ref = oracles.high_q_loss(P, cfg.gamma, cfg.policy_noise, cfg.noise_clip, low.tolist(), high.tolist(),
                                  as_lists(hi), hi_noise.tolist())
        assert abs(got - ref) <= 1e-10 * max(1.0, abs(ref))
        got = high_actor_loss(hi, nets).item()
        ref = oracles.high_actor_loss(P, low.tolist(), high.tolist(), as_lists(hi))
        assert abs(got - ref) <= 1e-10 * max(1.0, abs(ref))


def test_twin_critics_are_symmetric():
    cfg, nets, lo, _, noise, _, _, _ = hiro_instance(np.random.default_rng(1))
    a = low_q_loss(lo, nets, cfg, noise=noise).item()
    nets.low_q1, nets.low_q2 = nets.low_q2, nets.low_q1
    nets.low_q1_target, nets.low_q2_target = nets.low_q2_target, nets.low_q1_target
    assert low_q_loss(lo, nets, cfg, noise=noise).item() == pytest.approx(a, rel=1e-14)


def test_actor_loss_leaves_critic_untouched():
    cfg, nets, lo, hi, _, _, _, _ = hiro_instance(np.random.default_rng(2))
    nx.backward(low_actor_loss(lo, nets))
    assert all(p.grad is None for p in nets.low_q1.parameters())
    assert any(p.grad is not None for p in nets.low.parameters())
    nx.backward(high_actor_loss(hi, nets))
    assert all(p.grad is None for p in nets.high_q1.parameters())
    assert any(p.grad is not None for p in nets.high.parameters())


def test_losses_need_noise_and_batch():
    cfg, nets, lo, hi, _, _, _, _ = hiro_instance(np.random.default_rng(3))
    with pytest.raises(ValueError):
        low_q_loss(lo, nets, cfg)
    with pytest.raises(ValueError):
        high_q_loss(hi, nets, cfg)
    with pytest.raises(ValueError, match="empty"):
        high_actor_loss({k: v[:0] for k, v in hi.items()}, nets)


def test_high_policy_stays_in_bounds():
    cfg, nets, _, _, _, _, low, high = hiro_instance(np.random.default_rng(4))
    g = nets.high.forward(np.random.default_rng(0).normal(size=(200, 5)) * 100).data
    assert np.all(g >= low) and np.all(g <= high)


# -------------------------------------------------------------- relabeling

def segment(rng, n=4, length=None):
    states = rng.normal(size=(n, S + 2))
    return {"s": states[0], "g": rng.uniform(-2, 2, size=2), "s_next": rng.normal(size=S + 2), "states": states,
            "actions": rng.uniform(-1, 1, size=(n, 2)), "pm": rng.uniform(-1, 1, size=(n, 2, 2)),
            "ps": rng.uniform(0.1, 0.5, size=(n, 2, 2)), "length": n if length is None else length}


def test_relabel_matches_exhaustive_argmax():
    rng = np.random.default_rng(5)
    for _ in range(20):
        cfg, nets, _, _, _, _, low, high = hiro_instance(rng)
        seg = segment(rng)
        beh = LowBehaviour(nets, cfg.low_noise)
        seed = int(rng.integers(1 << 30))
        cands = relabel_candidates(seg, cfg, low, high, (0, 1), np.random.default_rng(seed))
        scores = oracles.relabel_scores(sac_params(nets), cfg.temperature, cfg.low_noise, cands.tolist(),
                                        seg["states"].tolist(), seg["actions"].tolist(), seg["pm"].tolist(),
                                        seg["ps"].tolist(), S, (0, 1))
        got = relabel_goal(seg, beh, None, cfg, np.random.default_rng(seed), low, high, S, (0, 1))
        np.testing.assert_array_equal(got, cands[oracles.exhaustive_argmax(scores)])


def test_candidate_set_layout():
    cfg, _, _, _, _, _, low, high = hiro_instance(np.random.default_rng(6))
    seg = segment(np.random.default_rng(0))
    cands = relabel_candidates(seg, cfg, low, high, (0, 1), np.random.default_rng(0))
    assert cands.shape == (cfg.n_candidates, 2)
    np.testing.assert_array_equal(cands[0], np.clip(seg["g"], low, high))
    np.testing.assert_array_equal(cands[1], np.clip(seg["s_next"][:2] - seg["s"][:2], low, high))
    assert np.all((cands >= low) & (cands <= high))


class FixedPolicy:
    """Behaviour whose density peaks where the chained goal equals a target."""

    def __init__(self, target):
        self.target = np.asarray(target)

    def log_prob(self, s_lo, pm, ps, actions):
        return -np.sum(np.square(s_lo[:, -2:] - self.target), axis=-1)


def test_relabel_recovers_the_generating_goal():
    cfg = HiroConfig(n_candidates=6)
    seg = segment(np.random.default_rng(7), n=1)
    true = seg["s_next"][:2] - seg["s"][:2]
    got = relabel_goal(seg, FixedPolicy(np.clip(true, -2.5, 2.5)), None, cfg, np.random.default_rng(0),
                       (-2.5, -2.5), (2.5, 2.5), S, (0, 1))
    np.testing.assert_array_equal(got, np.clip(true, -2.5, 2.5))


def test_ties_keep_the_original_goal():
    class Flat:
        def log_prob(self, s_lo, pm, ps, actions):
            return np.zeros(len(s_lo))

    seg = segment(np.random.default_rng(8))
    got = relabel_goal(seg, Flat(), None, HiroConfig(), np.random.default_rng(0), (-2.5, -2.5), (2.5, 2.5), S)
    np.testing.assert_array_equal(got, seg["g"])


def test_nan_scores_never_win():
    class NanFirst:
        def log_prob(self, s_lo, pm, ps, actions):
            out = -np.ones(len(s_lo))
            out[: len(s_lo) // 4] = np.nan
            return out

    seg = segment(np.random.default_rng(9))
    cands = np.random.default_rng(0).normal(size=(4, 2))
    scores = score_candidates(seg, cands, NanFirst(), None, S, (0, 1))
    assert scores[0] == -np.inf and np.all(np.isfinite(scores[1:]))


def test_padded_segments_only_score_stored_steps():
    cfg, nets, _, _, _, _, low, high = hiro_instance(np.random.default_rng(10))
    seg = segment(np.random.default_rng(11), n=4, length=2)
    short = {k: (v[:2] if k in ("states", "actions", "pm", "ps") else v) for k, v in seg.items()}
    short["length"] = 2
    cands = np.zeros((3, 2))
    beh = LowBehaviour(nets, 0.2)
    np.testing.assert_array_equal(score_candidates(seg, cands, beh, None, S, (0, 1)),
                                  score_candidates(short, cands, beh, None, S, (0, 1)))


def test_batched_relabel_matches_per_segment():
    tr = trainer(seed=3, warmup_steps=20)
    tr.train(120)
    batch = tr.high_replay.sample(8)
    batch["length"][0] = 3  # a padded segment
    args = (tr.low_bound, tr.high_bound, tr.env.spec.s_hat_width, tr.goal_dims)
    got = relabel_goals(batch, tr.behaviour, tr.cfg, np.random.default_rng(5), *args)
    rng = np.random.default_rng(5)
    want = [relabel_goal({k: batch[k][i] for k in batch}, tr.behaviour, None, tr.cfg, rng, *args)
            for i in range(8)]
    np.testing.assert_allclose(got, np.array(want), atol=1e-12)


def test_missing_segment_keys():
    seg = segment(np.random.default_rng(12))
    del seg["actions"]
    with pytest.raises(ValueError, match="actions"):
        relabel_goal(seg, None, None, HiroConfig(), np.random.default_rng(0), (-1, -1), (1, 1), S)
    seg = segment(np.random.default_rng(12))
    del seg["pm"], seg["ps"]
    with pytest.raises(ValueError, match="primitive outputs"):
        score_candidates(seg, np.zeros((2, 2)), None, None, S, (0, 1))


# ----------------------------------------------------------------- trainer

def test_config_validation():
    with pytest.raises(ValueError):
        HiroConfig(c=0).validate()
    with pytest.raises(ValueError):
        HiroConfig(n_candidates=1).validate()
    with pytest.raises(ValueError, match="unknown HIRO"):
        HiroConfig.from_dict({"horizon": 3})
    assert HiroConfig.from_dict(HiroConfig().to_dict()) == HiroConfig()
    with pytest.raises(ValueError):
        HiroConfig(subgoal_low=(1.0, 1.0), subgoal_high=(0.0, 2.0)).bounds()


def test_segments_and_delayed_updates():
    tr = trainer()
    tr.train(40)
    assert len(tr.high_replay) == 8
    assert tr.low_updates == 21
    assert tr.high_updates == 5
    seg = tr.high_replay.sample(1)
    assert seg["states"].shape == (1, 5, 4) and seg["length"][0] == 5


def test_training_is_deterministic():
    a, b = trainer(seed=2), trainer(seed=2)
    a.train(45)
    b.train(45)
    for (k, x), (_, y) in zip(a.nets.named_parameters().items(), b.nets.named_parameters().items()):
        assert x.data.tobytes() == y.data.tobytes(), k


def test_rollout_state_round_trip():
    tr = trainer()
    tr.train(23)
    st = tr.rollout_state()
    other = trainer()
    other.load_rollout_state(st)
    assert other.rollout_state() == st


def test_eval_policy_actions_in_bounds():
    tr = trainer()
    tr.train(30)
    pol = tr.eval_policy()
    pol.reset()
    env = make_env("point_umaze")
    obs = env.reset(np.random.default_rng(0))
    for _ in range(12):
        a = pol(obs)
        assert np.all(np.abs(a) <= 1.0)
        obs, _, _, _ = env.step(a)


def test_numerical_failure_is_raised():
    tr = trainer()
    tr.train(20)
    for p in tr.nets.low_q1.parameters():
        p.data[...] = np.inf
    with pytest.raises(NumericalFailure), np.errstate(invalid="ignore"):
        tr.train(1)


def test_ensemble_env_mismatch_is_rejected():
    env = make_env("point_umaze")
    ens = make_scripted_primitives("pusher", 6, env.spec.action_low, env.spec.action_high)
    with pytest.raises(ValueError, match="disagree"):
        HiroTrainer(env, ens, HiroConfig(), 0)


def test_hiro_train_returns_log():
    env = make_env("point_umaze")
    ens = make_scripted_primitives("nav", 2, env.spec.action_low, env.spec.action_high)
    log = hiro_train(env, ens, None, HiroConfig(warmup_steps=600, low_critic_hidden=4, high_hidden=4,
                                                encoder_hidden=3, decoder_hidden=3, baseline_hidden=3), 0, 510)
    assert len(log) >= 1 and log[0]["step"] <= 500

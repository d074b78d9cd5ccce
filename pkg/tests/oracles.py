"""Straight-line scalar reference implementations.

Everything here works on plain Python floats and nested lists with explicit
loops, sharing no code with the package, so the tests compare two
independent routes to the same number.
"""
from __future__ import annotations

import math

import numpy as np

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def tolist(x):
    return np.asarray(x, dtype=np.float64).tolist()


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def log_softmax(z):
    m = max(z)
    lse = m + math.log(sum(math.exp(v - m) for v in z))
    return [v - lse for v in z]


def logsumexp(z):
    m = max(z)
    if m == -math.inf:
        return -math.inf
    return m + math.log(sum(math.exp(v - m) for v in z))


def matvec_rows(x, W):
    """``x @ W`` for a vector ``x`` and a row-major matrix ``W`` (in, out)."""
    n_out = len(W[0])
    return [sum(x[i] * W[i][j] for i in range(len(x))) for j in range(n_out)]


# ----------------------------------------------------------------- networks

def mlp(params: dict, x, n_layers: int, head: str = "linear", activation: str = "relu", prefix: str = ""):
    h = list(x)
    for i in range(n_layers):
        W, b = params[f"{prefix}W{i}"], params[f"{prefix}b{i}"]
        h = [v + bj for v, bj in zip(matvec_rows(h, W), b)]
        if i < n_layers - 1:
            h = [max(v, 0.0) if activation == "relu" else math.tanh(v) for v in h]
    if head == "linear":
        return h
    d = len(h) // 2
    mu = h[:d]
    sigma = [math.exp(min(max(v, -20.0), 2.0)) for v in h[d:]]
    return mu, sigma


def lstm_states(W, b, xs):
    """All hidden states of a four-gate LSTM run over ``xs``; index 0 is zero."""
    d = len(b) // 4
    h, c = [0.0] * d, [0.0] * d
    out = [list(h)]
    for x in xs:
        z = [v + bj for v, bj in zip(matvec_rows(list(x) + h, W), b)]
        i = [sigmoid(v) for v in z[:d]]
        f = [sigmoid(v) for v in z[d:2 * d]]
        g = [math.tanh(v) for v in z[2 * d:3 * d]]
        o = [sigmoid(v) for v in z[3 * d:]]
        c = [f[k] * c[k] + i[k] * g[k] for k in range(d)]
        h = [o[k] * math.tanh(c[k]) for k in range(d)]
        out.append(list(h))
    return out


def birnn(p: dict, xs, prefix: str):
    """``(hf, hb)`` laid out like the package encoder: ``hf[i+1]`` and ``hb[i]`` follow element ``i``."""
    hf = lstm_states(p[prefix + "fwd.W"], p[prefix + "fwd.b"], xs)
    rb = lstm_states(p[prefix + "bwd.W"], p[prefix + "bwd.b"], xs[::-1])
    L = len(xs)
    hb = [rb[L - t] for t in range(L + 1)]
    return hf, hb


def attention_logits(p: dict, hf_states, hb_states, h):
    """``q_i = sum_r w_r tanh((W_f hf_i)_r + (W_b hb_i)_r + (W_d h)_r)``."""
    Wf, Wb, Wd, w = p["W_f"], p["W_b"], p["W_d"], p["w"]
    d = len(w)
    ctx = [sum(Wd[r][c] * h[c] for c in range(d)) for r in range(d)]
    q = []
    for f, bk in zip(hf_states, hb_states):
        pre = [sum(Wf[r][c] * f[c] for c in range(d)) + sum(Wb[r][c] * bk[c] for c in range(d)) + ctx[r]
               for r in range(d)]
        q.append(sum(w[r] * math.tanh(pre[r]) for r in range(d)))
    return q


def composer_dist(p: dict, variant: str, s, pm, ps, temperature: float, gumbel=None, action_scale: float = 1.0):
    """``(weights, mus, sigmas)`` of the composite policy at one state."""
    K = len(pm)
    if variant in ("full", "no_attention"):
        xs = [[v + bj for v, bj in zip(matvec_rows(list(pm[i]) + list(ps[i]), p["embed_W"]), p["embed_b"])]
              for i in range(K)]
        hf, hb = birnn(p, xs, "encoder.")
        ctx_in = hf[K] + hb[0] + list(s)
    if variant == "full":
        h = mlp(p, ctx_in, 2, prefix="decoder.")
        q = attention_logits(p, hf[1:], hb[:-1], h)
        z = [(qi + (0.0 if gumbel is None else gumbel[i])) / temperature for i, qi in enumerate(q)]
        return softmax(z), [list(m) for m in pm], [list(v) for v in ps]
    if variant == "no_attention":
        mu, sigma = mlp(p, ctx_in, 2, head="gaussian", prefix="decoder.")
    elif variant == "att_brnn_removed":
        flat = []
        for i in range(K):
            flat += list(pm[i]) + list(ps[i])
        mu, sigma = mlp(p, list(s) + flat, 2, head="gaussian", prefix="net.")
    else:
        mu, sigma = mlp(p, list(s), 3, head="gaussian", prefix="net.")
    return [1.0], [[math.tanh(m) * action_scale for m in mu]], [sigma]


def mixture_log_prob(w, mus, sigmas, a):
    terms = []
    for wi, mu, sg in zip(w, mus, sigmas):
        lp = 0.0
        for aj, mj, sj in zip(a, mu, sg):
            sj = max(sj, 1e-4)
            lp += -0.5 * ((aj - mj) / sj) ** 2 - math.log(sj) - HALF_LOG_2PI
        terms.append((math.log(wi) if wi > 0 else -math.inf) + lp)
    return logsumexp(terms)


def relaxed_sample(w, mus, sigmas, eps):
    A = len(mus[0])
    return [sum(w[i] * (mus[i][j] + sigmas[i][j] * eps[i][j]) for i in range(len(w))) for j in range(A)]


def relaxed_log_prob(w, mus, sigmas, a):
    lp = 0.0
    for j in range(len(a)):
        mean = sum(w[i] * mus[i][j] for i in range(len(w)))
        var = sum(w[i] ** 2 * max(sigmas[i][j], 1e-4) ** 2 for i in range(len(w)))
        lp += -0.5 * (a[j] - mean) ** 2 / var - 0.5 * math.log(var) - HALF_LOG_2PI
    return lp


def composer_act(p, variant, s, pm, ps, temperature, mode, gumbel=None, eps=None):
    if mode == "stochastic":
        w, mus, sigmas = composer_dist(p, variant, s, pm, ps, temperature, gumbel)
        a = relaxed_sample(w, mus, sigmas, eps)
        return a, relaxed_log_prob(w, mus, sigmas, a)
    w, mus, sigmas = composer_dist(p, variant, s, pm, ps, temperature, None)
    a = [sum(w[i] * mus[i][j] for i in range(len(w))) for j in range(len(mus[0]))]
    return a, mixture_log_prob(w, mus, sigmas, a)


# ---------------------------------------------------------------- SAC losses

def sac_losses(P: dict, variant: str, temperature: float, gamma: float, lam: float, batch: dict, noise):
    """``(value_loss, q_loss, policy_loss)`` with ``P`` mapping net name to its parameters."""
    n = len(batch["s"])
    v_terms, q_terms, p_terms = [], [0.0, 0.0], []
    for k in range(n):
        s, a = batch["s"][k], batch["a"][k]
        v_next = mlp(P["value_target"], batch["s2"][k], 3)[0]
        y = batch["r"][k] + gamma * (1.0 - batch["done"][k]) * v_next
        for j, name in enumerate(("q1", "q2")):
            q_terms[j] += 0.5 * (mlp(P[name], list(s) + list(a), 3)[0] - y) ** 2
        eps = noise.eps[k]
        gum = noise.gumbel[k]
        ap, logp = composer_act(P["policy"], variant, s, batch["pm"][k], batch["ps"][k], temperature,
                                "stochastic", gum, eps)
        qmin = min(mlp(P["q1"], list(s) + ap, 3)[0], mlp(P["q2"], list(s) + ap, 3)[0])
        v = mlp(P["value"], s, 3)[0]
        v_terms.append(0.5 * (v - (qmin - logp)) ** 2)
        p_terms.append(lam * logp - qmin)
    return sum(v_terms) / n, (q_terms[0] + q_terms[1]) / n, sum(p_terms) / n


# --------------------------------------------------------------- HIRO losses

def clip(v, lo, hi):
    return min(max(v, lo), hi)


def smooth(a, noise, policy_noise, noise_clip, low, high):
    out = []
    for j in range(len(a)):
        half = 0.5 * (high[j] - low[j])
        e = clip(noise[j] * policy_noise * half, -noise_clip * half, noise_clip * half)
        out.append(clip(a[j] + e, low[j], high[j]))
    return out


def high_policy(p, obs, low, high):
    z = mlp(p, obs, 3, prefix="net.")
    return [math.tanh(v) * 0.5 * (hi - lo) + 0.5 * (hi + lo) for v, lo, hi in zip(z, low, high)]


def low_q_loss(P, temperature, gamma, policy_noise, noise_clip, low, high, batch, noise, variant="full"):
    n = len(batch["s"])
    l1 = l2 = 0.0
    for k in range(n):
        a2, _ = composer_act(P["low_target"], variant, batch["s2"][k], batch["pm2"][k], batch["ps2"][k],
                             temperature, "deterministic")
        a2 = smooth(a2, noise[k], policy_noise, noise_clip, low, high)
        x2 = list(batch["s2"][k]) + a2
        qn = min(mlp(P["low_q1_target"], x2, 3)[0], mlp(P["low_q2_target"], x2, 3)[0])
        y = batch["r"][k] + gamma * (1.0 - batch["done"][k]) * qn
        x = list(batch["s"][k]) + list(batch["a"][k])
        l1 += (mlp(P["low_q1"], x, 3)[0] - y) ** 2
        l2 += (mlp(P["low_q2"], x, 3)[0] - y) ** 2
    return 0.5 * (l1 / n + l2 / n)


def low_actor_loss(P, temperature, batch, variant="full"):
    n = len(batch["s"])
    total = 0.0
    for k in range(n):
        a, _ = composer_act(P["low"], variant, batch["s"][k], batch["pm"][k], batch["ps"][k], temperature,
                            "deterministic")
        total += mlp(P["low_q1"], list(batch["s"][k]) + a, 3)[0]
    return -total / n


def high_q_loss(P, gamma, policy_noise, noise_clip, low, high, batch, noise):
    n = len(batch["s"])
    l1 = l2 = 0.0
    for k in range(n):
        g2 = high_policy(P["high_target"], batch["s_next"][k], low, high)
        g2 = smooth(g2, noise[k], policy_noise, noise_clip, low, high)
        x2 = list(batch["s_next"][k]) + g2
        qn = min(mlp(P["high_q1_target"], x2, 3)[0], mlp(P["high_q2_target"], x2, 3)[0])
        y = batch["R"][k] + gamma * (1.0 - batch["done"][k]) * qn
        x = list(batch["s"][k]) + list(batch["g"][k])
        l1 += (mlp(P["high_q1"], x, 3)[0] - y) ** 2
        l2 += (mlp(P["high_q2"], x, 3)[0] - y) ** 2
    return 0.5 * (l1 / n + l2 / n)


def high_actor_loss(P, low, high, batch):
    n = len(batch["s"])
    total = 0.0
    for k in range(n):
        g = high_policy(P["high"], batch["s"][k], low, high)
        total += mlp(P["high_q1"], list(batch["s"][k]) + g, 3)[0]
    return -total / n


def low_reward(s, g, s_next):
    return -math.sqrt(sum((a + b - c) ** 2 for a, b, c in zip(s, g, s_next)))


def relabel_scores(P, temperature, sigma, candidates, states, actions, pm, ps, s_hat_width, goal_dims):
    """Summed Gaussian behaviour log-density of each candidate goal, one candidate at a time."""
    scores = []
    for cand in candidates:
        total = 0.0
        pos0 = [states[0][d] for d in goal_dims]
        for k in range(len(states)):
            pos = [states[k][d] for d in goal_dims]
            g = [cand[j] + pos0[j] - pos[j] for j in range(len(cand))]
            s_lo = list(states[k][:s_hat_width]) + g
            mean, _ = composer_act(P["low"], "full", s_lo, pm[k], ps[k], temperature, "deterministic")
            for j in range(len(mean)):
                z = (actions[k][j] - mean[j]) / sigma
                total += -0.5 * z * z - math.log(sigma) - HALF_LOG_2PI
        scores.append(total)
    return scores


def exhaustive_argmax(scores):
    best, best_i = -math.inf, 0
    for i, v in enumerate(scores):
        if v > best:
            best, best_i = v, i
    return best_i


# ------------------------------------------------------------------ rewards

def reward_nav(pos, goal, action, contact, speed, coef, scale):
    d2 = sum((p - g) ** 2 for p, g in zip(pos, goal))
    u2 = sum(u * u for u in action)
    return scale * (-coef["goal"] * d2 + coef["velocity"] * speed + coef["alive"]
                    - coef["control"] * u2 - coef["contact"] * (1.0 if contact else 0.0))


def reward_maze(pos, goal, action, contact, coef):
    d2 = sum((p - g) ** 2 for p, g in zip(pos, goal))
    u2 = sum(u * u for u in action)
    return -coef["goal"] * d2 - coef["control"] * u2 - coef["contact"] * (1.0 if contact else 0.0)


def reward_pusher(obj, goal, arm, action, coef):
    return (-coef["goal"] * sum((o - g) ** 2 for o, g in zip(obj, goal))
            - coef["object"] * sum((a - o) ** 2 for a, o in zip(arm, obj))
            - coef["control"] * sum(u * u for u in action))


def reward_hurdle(pos, goal, ahead, reached, vz, vx, collided, coef):
    d2 = sum((p - g) ** 2 for p, g in zip(pos, goal))
    return (-coef["goal"] * d2 - coef["hurdle_count"] * ahead + coef["reach"] * (1.0 if reached else 0.0)
            + coef["vertical"] * abs(vz) + coef["velocity"] * vx - coef["collision"] * (1.0 if collided else 0.0))


def params_of(module) -> dict:
    return {k: tolist(v.data) for k, v in module.named_parameters().items()}

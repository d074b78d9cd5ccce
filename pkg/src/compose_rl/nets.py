"""Function approximators built on :mod:`compose_rl.numerics`.

Modules keep their parameters in an ordered ``name -> Tensor`` mapping so the
trainers, the optimizer and checkpointing all see the same flat view.
"""
from __future__ import annotations

import copy
import json
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0


class Module:
    """Minimal parameter container."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for cname, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{cname}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def clone(self) -> "Module":
        """Deep copy with fresh, detached parameter tensors."""
        twin = copy.deepcopy(self)
        for p in twin.parameters():
            p.grad = None
        return twin

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def _p(self, name: str, frozen: bool) -> Tensor:
        p = self._params[name]
        return Tensor(p.data) if frozen else p


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Mlp(Module):
    """Feed-forward net with a linear or diagonal-Gaussian output head.

    ``frozen=True`` in :meth:`forward` evaluates with constant copies of the
    weights, so no gradient reaches this net's parameters.
    """

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, activation: str = "relu",
                 head: str = "linear"):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("Mlp needs at least input and output widths")
        if activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        if head not in ("linear", "gaussian"):
            raise ValueError(f"unknown head {head!r}")
        self.widths = list(widths)
        self.activation = activation
        self.head = head
        dims = list(widths)
        if head == "gaussian":
            dims[-1] = 2 * widths[-1]
        self.n_layers = len(dims) - 1
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.add_param(f"W{i}", _uniform(rng, a, (a, b)))
            self.add_param(f"b{i}", _uniform(rng, a, (b,)))

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def forward(self, x, frozen: bool = False):
        x = nx.as_tensor(x)
        if x.shape[-1] != self.in_width:
            raise ShapeError(f"Mlp expects input width {self.in_width}, got shape {x.shape}")
        act = nx.relu if self.activation == "relu" else nx.tanh
        for i in range(self.n_layers):
            x = nx.linear(x, self._p(f"W{i}", frozen), self._p(f"b{i}", frozen))
            if i < self.n_layers - 1:
                x = act(x)
        if self.head == "linear":
            return x
        d = self.out_width
        mu = x[..., :d]
        log_std = nx.clip(x[..., d:], LOG_STD_MIN, LOG_STD_MAX)
        return mu, nx.exp(log_std)

    __call__ = forward


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_sequence(x, W, b, reverse: bool = False) -> Tensor:
    """Run an LSTM over ``x`` of shape ``(..., L, in)`` as one fused op.

    ``W`` has shape ``(in + d, 4d)`` with gate blocks ordered input, forget,
    cell, output.  Returns all states, shape ``(..., L + 1, d)``: in forward
    order index 0 is the zero initial state and index ``t + 1`` follows input
    ``t``; with ``reverse=True`` index ``L`` is the initial state and index
    ``t`` follows input ``t``.
    """
    x, W, b = nx.as_tensor(x), nx.as_tensor(W), nx.as_tensor(b)
    if x.ndim < 2:
        raise ShapeError(f"lstm_sequence needs input of shape (..., L, in), got {x.shape}")
    lead, L, n_in = x.shape[:-2], x.shape[-2], x.shape[-1]
    d = W.shape[1] // 4
    if W.shape != (n_in + d, 4 * d) or b.shape != (4 * d,):
        raise ShapeError(f"lstm_sequence: input {x.shape}, weight {W.shape}, bias {b.shape} disagree")
    xs = x.data.reshape(-1, L, n_in)
    if reverse:
        xs = xs[:, ::-1, :]
    n = xs.shape[0]
    H = np.zeros((n, L + 1, d))
    C = np.zeros((n, L + 1, d))
    cache = []
    Wd = W.data
    for t in range(L):
        xh = np.concatenate([xs[:, t, :], H[:, t, :]], axis=1)
        z = xh @ Wd + b.data
        i, f, g, o = _sig(z[:, :d]), _sig(z[:, d:2 * d]), np.tanh(z[:, 2 * d:3 * d]), _sig(z[:, 3 * d:])
        C[:, t + 1] = f * C[:, t] + i * g
        tc = np.tanh(C[:, t + 1])
        H[:, t + 1] = o * tc
        cache.append((xh, i, f, g, o, tc))
    out = H[:, ::-1, :] if reverse else H

    def vjp(gH):
        gH = np.reshape(gH, (n, L + 1, d))
        if reverse:
            gH = gH[:, ::-1, :]
        gW = np.zeros_like(Wd)
        gb = np.zeros(4 * d)
        gx = np.zeros((n, L, n_in))
        dh_next = np.zeros((n, d))
        dc_next = np.zeros((n, d))
        for t in reversed(range(L)):
            xh, i, f, g, o, tc = cache[t]
            dh = gH[:, t + 1] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = np.concatenate([dc * g * i * (1.0 - i), dc * C[:, t] * f * (1.0 - f),
                                 dc * i * (1.0 - g * g), dh * tc * o * (1.0 - o)], axis=1)
            gW += xh.T @ dz
            gb += dz.sum(axis=0)
            dxh = dz @ Wd.T
            gx[:, t] = dxh[:, :n_in]
            dh_next = dxh[:, n_in:]
            dc_next = dc * f
        if reverse:
            gx = gx[:, ::-1, :]
        return gx.reshape(x.shape), gW, gb
    return nx.custom_op(out.reshape(lead + (L + 1, d)), (x, W, b), vjp)


class LstmCell(Module):
    """Four-gate LSTM (input, forget, cell, output) with forget bias 1."""

    def __init__(self, in_width: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.in_width, self.hidden = in_width, hidden
        fan = in_width + hidden
        self.add_param("W", _uniform(rng, fan, (fan, 4 * hidden)))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.add_param("b", b)

    def step(self, x, h, c, frozen: bool = False) -> tuple[Tensor, Tensor]:
        """One unfused step from explicit ``(h, c)``; used for single-step inspection."""
        d = self.hidden
        z = nx.linear(nx.concat([nx.as_tensor(x), nx.as_tensor(h)], axis=-1), self._p("W", frozen), self._p("b", frozen))
        i = nx.sigmoid(z[..., :d])
        f = nx.sigmoid(z[..., d:2 * d])
        g = nx.tanh(z[..., 2 * d:3 * d])
        o = nx.sigmoid(z[..., 3 * d:])
        c = f * c + i * g
        h = o * nx.tanh(c)
        return h, c

    def sequence(self, x, reverse: bool = False, frozen: bool = False) -> Tensor:
        return lstm_sequence(x, self._p("W", frozen), self._p("b", frozen), reverse)


class BiRnn(Module):
    """Bidirectional LSTM encoder.

    For a length-L input the forward pass returns ``L + 1`` states per
    direction, stacked along axis -2.  ``hf[..., 0, :]`` and ``hb[..., L, :]``
    are the zero initial states; ``hf[..., i+1, :]`` and ``hb[..., i, :]`` are
    the states after reading element ``i``.  The final states are
    ``hf[..., L, :]`` and ``hb[..., 0, :]``.
    """

    def __init__(self, in_width: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        self.fwd = self.add_child("fwd", LstmCell(in_width, hidden, rng))
        self.bwd = self.add_child("bwd", LstmCell(in_width, hidden, rng))

    def forward(self, seq, frozen: bool = False):
        """``seq`` is a list of ``(..., in)`` tensors or one ``(..., L, in)`` tensor."""
        if isinstance(seq, (list, tuple)):
            if len(seq) == 0:
                raise ValueError("BiRnn needs a non-empty sequence")
            X = nx.stack(seq, axis=-2)
        else:
            X = nx.as_tensor(seq)
            if X.ndim < 2 or X.shape[-2] == 0:
                raise ValueError("BiRnn needs a non-empty sequence")
        L = X.shape[-2]
        hf = self.fwd.sequence(X, reverse=False, frozen=frozen)
        hb = self.bwd.sequence(X, reverse=True, frozen=frozen)
        return hf, hb, hf[..., L, :], hb[..., 0, :]

    __call__ = forward


def polyak_update(target_params: Sequence[Tensor], online_params: Sequence[Tensor], tau: float) -> None:
    """``target <- tau * online + (1 - tau) * target``, in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    target_params, online_params = list(target_params), list(online_params)
    if len(target_params) != len(online_params):
        raise ShapeError(f"{len(target_params)} target params vs {len(online_params)} online params")
    for t, o in zip(target_params, online_params):
        if t.shape != o.shape:
            raise ShapeError(f"polyak_update: target shape {t.shape} vs online shape {o.shape}")
        t.data *= (1.0 - tau)
        t.data += tau * o.data


# ------------------------------------------------------------- serialization

def serialize_params(params: dict[str, Tensor]) -> tuple[bytes, dict]:
    """Flatten parameters to little-endian float64 bytes plus a shape manifest."""
    entries, chunks, offset = [], [], 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    return b"".join(chunks), {"dtype": "float64-le", "tensors": entries}


def deserialize_params(blob: bytes, manifest: dict, into: dict[str, Tensor]) -> None:
    """Copy values from ``blob`` into the matching tensors of ``into``."""
    for key in ("dtype", "tensors"):
        if key not in manifest:
            raise ValueError(f"corrupt manifest: missing field {key!r}")
    if manifest["dtype"] != "float64-le":
        raise ValueError(f"corrupt manifest: field 'dtype' has unsupported value {manifest['dtype']!r}")
    flat = np.frombuffer(blob, dtype="<f8")
    seen = set()
    for i, e in enumerate(manifest["tensors"]):
        for key in ("name", "shape", "offset", "count"):
            if key not in e:
                raise ValueError(f"corrupt manifest: tensors[{i}] missing field {key!r}")
        name, shape = e["name"], tuple(e["shape"])
        if name not in into:
            raise ValueError(f"corrupt manifest: field 'name' {name!r} matches no parameter")
        if int(np.prod(shape)) != e["count"] or e["offset"] + e["count"] > flat.size:
            raise ValueError(f"corrupt manifest: field 'count' inconsistent for {name!r}")
        target = into[name]
        if target.shape != shape:
            raise ShapeError(f"parameter {name!r}: checkpoint shape {shape} vs model shape {target.shape}")
        target.data[...] = flat[e["offset"]:e["offset"] + e["count"]].reshape(shape)
        seen.add(name)
    missing = set(into) - seen
    if missing:
        raise ValueError(f"corrupt manifest: no entry for parameters {sorted(missing)}")


def save_module(module: Module, bin_path, manifest_path) -> None:
    blob, manifest = serialize_params(module.named_parameters())
    with open(bin_path, "wb") as fh:
        fh.write(blob)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_module(module: Module, bin_path, manifest_path) -> Module:
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(bin_path, "rb") as fh:
        blob = fh.read()
    deserialize_params(blob, manifest, module.named_parameters())
    return module

"""Named, independent random streams derived from one master seed."""
from __future__ import annotations

import numpy as np

STREAMS = ("env", "policy", "gumbel", "replay", "init", "eval", "explore", "relabel")


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    """One generator per component, keyed by a fixed spawn counter.

    Components that share a master seed share their streams, so e.g. every
    ablation variant sees the same environment randomness.
    """
    return {name: np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(i,)))
            for i, name in enumerate(STREAMS)}


def streams_state(streams: dict[str, np.random.Generator]) -> dict:
    return {k: g.bit_generator.state for k, g in streams.items()}


def load_streams_state(streams: dict[str, np.random.Generator], state: dict) -> None:
    for k, s in state.items():
        streams[k].bit_generator.state = s

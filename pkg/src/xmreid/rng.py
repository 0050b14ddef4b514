"""Deterministic random number generation.

Every stochastic component (init, sampling, augmentation) draws from a
`numpy.random.Generator` backed by the Philox counter-based bit generator,
seeded explicitly. Same seed, same platform -> bit-identical streams.
"""

from __future__ import annotations

import numpy as np


def new_rng(seed: int) -> np.random.Generator:
    """Fresh deterministic generator for the given seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def derive_rng(seed: int, *tags: int) -> np.random.Generator:
    """Independent stream derived from a base seed and integer tags.

    Used to decorrelate sub-streams (e.g. per-identity rendering) without
    consuming the parent stream.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tags)
    return np.random.Generator(np.random.Philox(ss))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of the generator state."""
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {
            "counter": [int(x) for x in state["state"]["counter"]],
            "key": [int(x) for x in state["state"]["key"]],
        },
        "buffer": [int(x) for x in state["buffer"]],
        "buffer_pos": int(state["buffer_pos"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def restore_rng(snapshot: dict) -> np.random.Generator:
    """Rebuild a generator from an `rng_state` snapshot."""
    if snapshot["bit_generator"] != "Philox":
        raise ValueError(f"unsupported bit generator {snapshot['bit_generator']!r}")
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(snapshot["state"]["counter"], dtype=np.uint64),
            "key": np.array(snapshot["state"]["key"], dtype=np.uint64),
        },
        "buffer": np.array(snapshot["buffer"], dtype=np.uint64),
        "buffer_pos": snapshot["buffer_pos"],
        "has_uint32": snapshot["has_uint32"],
        "uinteger": snapshot["uinteger"],
    }
    return np.random.Generator(bg)

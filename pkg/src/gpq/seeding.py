"""Named random sub-streams derived from a single run seed."""

import numpy as np

STREAMS = ("data", "init", "shuffle", "eval")


def streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


def stream(seed: int, name: str) -> np.random.Generator:
    return streams(seed)[name]

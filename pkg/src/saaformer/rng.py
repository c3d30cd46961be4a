"""Named, independent random streams derived from one integer seed.

Each stream is a Philox (counter-based) generator keyed by
``SeedSequence([seed, stream_id])``, so streams never overlap and adding a
new stream does not disturb existing ones.
"""

import numpy as np

STREAMS = {
    "data": 0,
    "init": 1,
    "shuffle": 2,
    "dropout": 3,
    "split": 4,
}


def stream(seed: int, name: str) -> np.random.Generator:
    try:
        key = STREAMS[name]
    except KeyError:
        raise ValueError(f"unknown random stream {name!r}; known: {sorted(STREAMS)}") from None
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), key])))

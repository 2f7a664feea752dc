import numpy as np


def as_generator(seed):
    """Return a numpy Generator for an int, SeedSequence, Generator or None."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)

"""Seeded random number generation.

Every stochastic routine in survkit takes an explicit unsigned 64-bit seed and
builds its generator through :func:`make_rng`.  The generator is numpy's
``PCG64`` bit generator (O'Neill's permuted congruential generator, 128-bit
state, XSL-RR output) whose state is initialised by ``SeedSequence``.  Both
algorithms are fully specified and platform independent, so an identical seed
produces identical draws on every platform.

Independent substreams are keyed by a tuple of non-negative integers, e.g.
``make_rng(seed, replicate_index)``.  The key is passed as the SeedSequence
``spawn_key`` which means substream ``(seed, i)`` does not depend on how many
other substreams were created before it.  This is what makes serial and
parallel execution of bootstrap replicates, CV folds and forest trees produce
the same numbers.
"""

import numpy as np

MAX_SEED = 2**64 - 1


def check_seed(seed):
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must lie in [0, 2**64 - 1], got {seed}")
    return seed


def make_rng(seed, *key):
    """Return a ``numpy.random.Generator`` for ``seed`` and optional substream key."""
    seed = check_seed(seed)
    spawn_key = tuple(int(k) for k in key)
    if any(k < 0 for k in spawn_key):
        raise ValueError("substream keys must be non-negative")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=spawn_key)
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed, *key):
    """Derive a new 64-bit seed from ``seed`` and a substream key."""
    seed = check_seed(seed)
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def weighted_draw(rng, weights, size):
    """Draw ``size`` row indices with replacement, probability proportional to ``weights``.

    Weights are rescaled by their maximum before the cumulative sum so that any
    constant weight vector becomes exactly all-ones; constant weights therefore
    reproduce the uniform draw bit for bit at a matched generator state.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty vector")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    top = w.max()
    if top <= 0:
        raise ValueError("at least one weight must be positive")
    cdf = np.cumsum(w / top)
    u = rng.random(size) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    # u can round up to cdf[-1]; fall back to the last row with positive weight
    return np.minimum(idx, np.flatnonzero(w > 0)[-1])

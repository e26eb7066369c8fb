"""Small builders shared by the test modules."""
import numpy as np

from structureflow.bridge import BridgeBatch, bridge_targets, sample_bridge_point
from structureflow.datagen import condition_name
from structureflow.numerics import Prng


def random_batch(d, n, knockouts=(), sigma=1.0, seed=0, t_min=0.05):
    """Bridge batch over random endpoints, conditions drawn from obs plus ``knockouts``."""
    prng = Prng(seed)
    names = np.array([condition_name(None)] + [condition_name(c) for c in knockouts], dtype=object)
    cond = names[prng.integers(len(names), n)]
    x0 = prng.normal((n, d))
    x1 = prng.normal((n, d))
    t = prng.uniform(t_min, 1 - t_min, n)
    seg = prng.integers(3, n)
    if sigma > 0:
        x = sample_bridge_point(x0, x1, t, sigma, prng)
    else:
        x = t[:, None] * x1 + (1 - t[:, None]) * x0
    v, s = bridge_targets(x0, x1, x, t, sigma)
    return BridgeBatch(t, seg + t, x, v, s, cond, seg)


def central_diff(f, flat, idx, h=1e-6):
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * h)
    return out

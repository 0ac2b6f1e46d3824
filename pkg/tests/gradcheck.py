"""Central finite differences for the gradient-check tests."""

import numpy as np

STEP = 1e-5


def numeric_grad(f, x, step=STEP):
    """d f() / d x by central differences; ``x`` is perturbed in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a, n, floor=1e-6):
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(a, np.float64), np.asarray(n, np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))

"""Finite-difference oracle and small fixtures shared by the test modules."""
import numpy as np

from matrrec import numerics as nx


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def numeric_grad(f, t, h=1e-5, coords=None):
    """Central differences of scalar ``f()`` w.r.t. entries of tensor ``t``."""
    coords = list(np.ndindex(t.shape)) if coords is None else coords
    out = np.zeros(len(coords))
    for n, ix in enumerate(coords):
        old = t.data[ix]
        t.data[ix] = old + h
        fp = float(f())
        t.data[ix] = old - h
        fm = float(f())
        t.data[ix] = old
        out[n] = (fp - fm) / (2 * h)
    return out


def analytic_grads(f, tensors):
    for t in tensors:
        t.grad = None
    tape = nx.Tape()
    with tape:
        loss = f()
    nx.backward(tape, loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]


def check_grads(f, tensors, h=1e-5, max_coords=None, rng=None):
    """Max relative error between backward and central differences over ``tensors``.

    With ``max_coords`` a random subset of entries is checked per tensor; the
    entry with the largest analytic gradient is always included.
    """
    grads = analytic_grads(f, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        coords = list(np.ndindex(t.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            pick = set(rng.choice(len(coords), max_coords - 1, replace=False).tolist())
            pick.add(int(np.argmax(np.abs(g).reshape(-1))))
            coords = [coords[i] for i in sorted(pick)]
        fd = numeric_grad(lambda: f().data, t, h, coords)
        an = np.array([g[c] for c in coords])
        worst = max(worst, rel_err(fd, an))
    return worst

"""Central finite-difference oracle used across the test suite."""

import numpy as np

H = 1e-5
FLOOR = 1e-6


def numeric_grad(f, arrays, h=H):
    """d f(*arrays) / d arrays[i] by central differences; ``f`` returns a float."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + h
            fp = f(*arrays)
            arr[i] = orig - h
            fm = f(*arrays)
            arr[i] = orig
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(analytic, numeric, floor=FLOOR):
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def param_grad_errors(build_loss, tensors, h=H, floor=FLOOR, max_entries=None, seed=0):
    """Backprop ``build_loss()`` once, then perturb each tensor's data in place.

    ``build_loss`` must rebuild the graph from the tensors' current data and
    return a scalar Tensor. Returns the max relative error per tensor. With
    ``max_entries`` only that many randomly chosen entries per tensor are probed.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    build_loss().backward()
    errs = []
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = build_loss().item()
            flat[i] = orig - h
            fm = build_loss().item()
            flat[i] = orig
            num.reshape(-1)[i] = (fp - fm) / (2 * h)
        errs.append(rel_err(analytic.reshape(-1)[idx], num.reshape(-1)[idx], floor))
    return errs

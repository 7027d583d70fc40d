import numpy as np


def relative_error(analytic, numeric, floor=1e-12) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def numeric_gradient(loss_fn, array, eps, indices=None):
    """Central differences of ``loss_fn()`` w.r.t. entries of ``array`` (perturbed in place)."""
    flat = array.reshape(-1)
    if indices is None:
        indices = np.arange(flat.size)
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + eps
        up = loss_fn()
        flat[i] = old - eps
        down = loss_fn()
        flat[i] = old
        out[n] = (up - down) / (2 * eps)
    return out


def gradient_check(loss_fn, analytic_grads, arrays, eps=None, max_entries=None, rng=None,
                   skip=()):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn()`` evaluates the scalar loss at the current contents of
    ``arrays`` (name -> ndarray, perturbed in place); ``analytic_grads`` maps
    the same names to the gradients under test. With ``max_entries`` only a
    random subset of each array is differenced. Names in ``skip`` are ignored.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for name, arr in arrays.items():
        if name in skip:
            continue
        if eps is None:
            step = 1e-3 if arr.dtype == np.float32 else 1e-5
        else:
            step = eps
        idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            idx = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        numeric = numeric_gradient(loss_fn, arr, step, idx)
        analytic = np.asarray(analytic_grads[name], dtype=np.float64).reshape(-1)[idx]
        worst = max(worst, relative_error(analytic, numeric))
    return worst

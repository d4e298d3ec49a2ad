"""Independent oracles shared by the test modules."""

import numpy as np


def central_difference(f, arrays, step=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each array in ``arrays``.

    ``f`` reads the arrays by reference, so they are perturbed in place and
    restored afterwards.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            hi = f()
            flat[i] = old - step
            lo = f()
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-6):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    err = np.abs(analytic - numeric)
    bound = atol + rtol * np.abs(numeric)
    worst = np.max(err - bound) if err.size else -1.0
    assert worst <= 0, f"gradient mismatch: max excess {worst}, max err {err.max()}"

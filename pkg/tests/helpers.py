"""Shared test utilities: central finite-difference gradient oracle."""

import numpy as np


def finite_difference(f, arrays, h=1e-4):
    """Central-difference gradient of scalar ``f(*arrays)`` w.r.t. each array.

    The oracle never touches the reverse-mode machinery: it re-evaluates the
    forward map at perturbed inputs only.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*arrays))
            flat[i] = orig - h
            fm = float(f(*arrays))
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4):
    """Relative error, normalized by gradient magnitude with a unit floor.

    Accepts lists of arrays of any (possibly differing) shapes; a missing
    analytic gradient for a nonzero numeric one is a failure.
    """
    if not isinstance(analytic, (list, tuple)):
        analytic = [analytic]
    if not isinstance(numeric, (list, tuple)):
        numeric = [numeric]
    assert len(analytic) == len(numeric)
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        n = np.asarray(n, dtype=np.float64)
        if a is None:
            a = np.zeros_like(n)
        a = np.asarray(a, dtype=np.float64)
        scale = max(1.0, float(np.abs(n).max(initial=0.0)),
                    float(np.abs(a).max(initial=0.0)))
        err = np.abs(a - n).max(initial=0.0) / scale
        assert err <= rtol, (f"gradient mismatch on array {i}: "
                             f"rel err {err:.3e} > {rtol:.0e}")

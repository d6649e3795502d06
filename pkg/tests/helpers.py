"""Shared test oracles, chiefly central finite differences for gradients.

The finite-difference path only ever calls the forward computation; it never
touches tape gradients, so it stays an independent check of backward().
"""

import numpy as np

from syncmv import tensor as T


def fd_gradient(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at ndarray x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b, floor=1e-6):
    """Max elementwise relative error with an absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def gradcheck(build, inputs, h=1e-5, tol=1e-4, indices=None):
    """Compare tape gradients of a scalar-valued graph against central FD.

    build: callable taking a dict name -> Tensor and returning a scalar Tensor.
    inputs: dict name -> ndarray (float64).
    indices: optional dict name -> flat index list to probe (default: all).
    Returns the max relative error over all probed coordinates.
    """
    tensors = {k: T.Tensor(v.copy(), requires_grad=True) for k, v in inputs.items()}
    with T.Tape():
        loss = build(tensors)
        T.backward(loss)
    worst = 0.0
    for name, arr in inputs.items():
        tape_grad = tensors[name].grad
        assert tape_grad is not None, f"no gradient reached input {name!r}"
        assert tape_grad.shape == arr.shape

        probe = indices.get(name) if indices else None
        if probe is None:
            probe = range(arr.size)

        def f_at(x, _name=name):
            vals = {k: (x if k == _name else inputs[k]) for k in inputs}
            ts = {k: T.Tensor(v) for k, v in vals.items()}
            return float(build(ts).data)

        for i in probe:
            x = arr.copy()
            flat = x.reshape(-1)
            orig = flat[i]
            flat[i] = orig + h
            fp = f_at(x)
            flat[i] = orig - h
            fm = f_at(x)
            fd = (fp - fm) / (2.0 * h)
            err = rel_err(tape_grad.reshape(-1)[i], fd)
            worst = max(worst, err)
    assert worst < tol, f"gradcheck failed: max rel err {worst:.3e} >= {tol}"
    return worst

"""Finite-difference and straight-line oracles shared by the test modules."""

import numpy as np

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-6


def central_diff(f, x, step=FD_STEP):
    """Central finite differences of scalar ``f`` over every entry of array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return grad


def grad_mismatch(analytic, numeric, rel=REL_TOL, floor=ABS_FLOOR):
    """Indices where analytic and numeric gradients disagree.

    Entries with |numeric| < floor are compared absolutely at ``floor``;
    the rest by relative error against the larger magnitude.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    small = np.abs(n) < floor
    err_abs = np.abs(a - n)
    rel_err = err_abs / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
    bad = np.where(small, err_abs > floor, rel_err > rel)
    return np.flatnonzero(bad)


def straight_line_forward(weights, biases, x, output="linear", bound=1.0):
    """Scalar-loop evaluation of a ReLU MLP, independent of numpy matmul."""
    h = [float(v) for v in x]
    last = len(weights) - 1
    for li, (w, b) in enumerate(zip(weights, biases)):
        out = []
        for r in range(len(b)):
            z = float(b[r])
            for c in range(len(h)):
                z += float(w[r][c]) * h[c]
            if li < last:
                z = z if z > 0 else 0.0
            elif output == "tanh":
                z = bound * np.tanh(z)
            out.append(z)
        h = out
    return np.array(h)

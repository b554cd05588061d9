"""Shared test oracles: central finite differences for gradient checks."""

import numpy as np

from speechsum import tensor as tz

_EPS32 = float(np.finfo(np.float32).eps)


def finite_diff(loss_fn, params, h=1e-3):
    """Central-difference gradients of a scalar-returning closure.

    ``loss_fn`` must re-run the forward pass from current parameter
    values (no tape needed). Returns one f64 array per parameter.
    """
    grads = []
    for p in params:
        flat = p.data.reshape(-1)
        g = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i].copy()
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
        grads.append(g.reshape(p.data.shape))
    return grads


def fd_resolution(loss_value, h):
    """Smallest gradient difference a central difference can resolve when
    the loss is read out at f32: one ulp of the loss over the step."""
    return _EPS32 * max(1.0, abs(loss_value)) / h


def max_rel_err(analytic, fd, atol=0.0):
    """Worst relative disagreement after discounting sub-resolution noise."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(fd, dtype=np.float64)
    excess = np.clip(np.abs(a - f) - atol, 0.0, None)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-12)
    return float((excess / denom).max())


def check_grads(loss_fn, params, tol, h=1e-3):
    """Run loss_fn under a tape, compare every parameter gradient with
    central finite differences. Returns worst relative error."""
    with tz.GradTape() as tape:
        loss = loss_fn()
    tz.backward(loss, tape)
    fd = finite_diff(lambda: loss_fn().item(), params, h=h)
    atol = fd_resolution(loss.item(), h)
    worst = 0.0
    for p, g_fd in zip(params, fd):
        worst = max(worst, max_rel_err(p.grad, g_fd, atol=atol))
    assert worst < tol, f"gradient mismatch: max rel err {worst:.3e} >= {tol}"
    return worst

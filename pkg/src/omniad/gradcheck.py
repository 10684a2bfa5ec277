"""Finite-difference validation of taped gradients."""

import numpy as np

from .autodiff import Tape, backward


def _numeric_grad(f, x, h):
    flat = x.data.reshape(-1)
    num = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        num[i] = (fp - fm) / (2.0 * h)
    return num.reshape(x.data.shape)


def grad_check(f, x, h=1e-3):
    """Max relative error between taped and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor.  The analytic gradient comes from
    one taped forward/backward; the numeric one perturbs each element of
    ``x`` by +-h.  Relative error uses denominator max(|a|, |b|, 1e-8).
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    backward(y, tape)
    analytic = x.grad.copy()
    numeric = _numeric_grad(f, x, h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


def grad_check_params(f, params, h=1e-3):
    """Run :func:`grad_check` against several tensors of one computation.

    ``f`` takes no arguments and reads the given parameter tensors; returns
    the worst relative error across all of them.
    """
    worst = 0.0
    for p in params:
        worst = max(worst, grad_check(lambda _t: f(), p, h=h))
    return worst

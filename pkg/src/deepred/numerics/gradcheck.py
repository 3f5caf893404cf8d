"""Central finite-difference check of analytic gradients."""
import numpy as np

from .autodiff import NonFiniteError, backward, zero_grads


def _evaluate(fn):
    loss = fn()
    value = float(loss.value)
    if not np.isfinite(value):
        raise NonFiniteError("gradient_check: non-finite loss")
    return loss, value


def gradient_check(fn, params, eps=1e-5, return_details=False):
    """Largest relative error between backprop and central differences.

    ``fn`` takes no arguments and rebuilds the loss from the current values
    of ``params``; it is called ``2 * n_coords + 1`` times.  The relative
    error of a coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    zero_grads(params)
    loss, _ = _evaluate(fn)
    backward(loss)
    worst = 0.0
    details = []
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            _, plus = _evaluate(fn)
            flat[idx] = orig - eps
            _, minus = _evaluate(fn)
            flat[idx] = orig
            numeric = (plus - minus) / (2.0 * eps)
            a = analytic.reshape(-1)[idx]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if return_details:
                details.append((p.name, idx, a, numeric, err))
            worst = max(worst, err)
    zero_grads(params)
    return (worst, details) if return_details else worst

"""Central finite-difference checks against reverse-mode gradients (float64)."""

import numpy as np

from multiref.autodiff import Tensor, default_dtype


def numeric_grad(f, arrays, k, step=1e-4):
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[k])
    it = np.nditer(base[k], flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[k][idx] += step
        minus[k][idx] -= step
        grad[idx] = (f(*plus) - f(*minus)) / (2 * step)
    return grad


def relative_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn, *arrays, step=1e-4, seed=0):
    """Max relative error over inputs of ``sum(w * fn(*tensors))`` with random ``w``."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        probe = fn(*[Tensor(a) for a in arrays])
        weights = rng.standard_normal(probe.shape)

        def scalar(*xs):
            return float((fn(*[Tensor(x) for x in xs]).data * weights).sum())

        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        (fn(*tensors) * weights).sum().backward()
        errors = [relative_error(t.grad, numeric_grad(scalar, arrays, k, step))
                  for k, t in enumerate(tensors)]
    return max(errors)


def check_parameter_gradients(loss_fn, params, step=1e-4, max_entries=24, seed=0):
    """Max relative error of ``loss_fn()`` gradients over a random subset of
    entries of each parameter (perturbed in place, float64 model assumed)."""
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    loss_fn().backward()
    errors = []
    for p in params:
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
        analytic = p.grad.reshape(-1)[picks].copy()
        numeric = np.empty(len(picks))
        for n, i in enumerate(picks):
            keep = flat[i]
            flat[i] = keep + step
            up = float(loss_fn().data)
            flat[i] = keep - step
            down = float(loss_fn().data)
            flat[i] = keep
            numeric[n] = (up - down) / (2 * step)
        errors.append(relative_error(analytic, numeric))
    return max(errors)

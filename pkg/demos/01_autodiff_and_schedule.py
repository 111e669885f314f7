"""
A short tour of the numpy autodiff engine and the noise schedule.

Run with ``python demos/01_autodiff_and_schedule.py``. Takes a second or two.
"""
import numpy as np

from multiref.autodiff import Parameter, Tensor, default_dtype, softmax
from multiref.diffusion import cfg_predict, forward_diffuse, make_noise_schedule

rng = np.random.default_rng(0)

# --- reverse mode on a tiny expression -----------------------------------
# f(w) = sum(softmax(x @ w) * y), checked against central differences.
with default_dtype(np.float64):
    x = Tensor(rng.normal(size=(3, 4)))
    y = rng.normal(size=(3, 5))
    w = Parameter(rng.normal(size=(4, 5)))

    loss = (softmax(x @ w) * y).sum()
    loss.backward()

    h = 1e-6
    numeric = np.zeros_like(w.data)
    for idx in np.ndindex(*w.shape):
        old = w.data[idx]
        w.data[idx] = old + h
        up = float((softmax(x @ w) * y).sum().data)
        w.data[idx] = old - h
        down = float((softmax(x @ w) * y).sum().data)
        w.data[idx] = old
        numeric[idx] = (up - down) / (2 * h)

print("analytic vs numeric max abs diff:", np.abs(w.grad - numeric).max())

# --- the schedule ----------------------------------------------------------
sched = make_noise_schedule(200)
print("T =", sched.T, " beta range:", sched.beta[0], "->", sched.beta[-1])
print("alpha_bar at t = 0, 50, 100, 199:", sched.alpha_bar[[0, 50, 100, 199]].round(5))

# Forward diffusion keeps unit variance for unit-variance data.
x0 = rng.normal(size=(20000,))
for t in (0, 60, 199):
    xt = forward_diffuse(x0, t, rng.normal(size=x0.shape), sched)
    print(f"t={t:3d}  corr(x0, xt)={np.corrcoef(x0, xt)[0, 1]:.3f}  var(xt)={xt.var():.3f}")

# Guidance is a straight-line extrapolation from the unconditional estimate.
cond, uncond = np.ones(3), np.zeros(3)
for s in (0.0, 1.0, 7.5):
    print("scale", s, "->", cfg_predict(cond, uncond, s))

"""The reverse-mode tape: build an expression, pull gradients back through
it, check them against finite differences, then fit a tiny model with
nothing but the tape and a loop.

Run: python3 demos/01_autodiff.py
"""

import numpy as np

from duplex import tensor as T
from duplex.tensor import Tensor, grad_check

rng = np.random.default_rng(0)

# -- a small expression, differentiated exactly ---------------------------

x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
h = (x @ w).gelu()
loss = (h * h).mean()
T.backward(loss)
print("loss:", loss.item())
print("dloss/dw:\n", w.grad)

# the same gradient, measured numerically
def squared_mean(t):
    z = (x.detach() @ t).gelu()
    return (z * z).mean()

err = grad_check(squared_mean, w, eps=1e-5)
print(f"finite-difference relative error: {err:.2e}")
assert err < 1e-6

# -- gradients can be switched off for inference ---------------------------

with T.no_grad():
    y = (x @ w).tanh()
print("inside no_grad, results carry no tape:", y.requires_grad)

# -- fit y = sin(2x) with a two-layer net ----------------------------------

xs = np.linspace(-1.0, 1.0, 256)[:, None]
ys = np.sin(2.0 * xs)

w1 = Tensor(rng.normal(size=(1, 32)) * 0.5, requires_grad=True)
b1 = Tensor(np.zeros(32), requires_grad=True)
w2 = Tensor(rng.normal(size=(32, 1)) * 0.5, requires_grad=True)
b2 = Tensor(np.zeros(1), requires_grad=True)
params = [w1, b1, w2, b2]

for step in range(1000):
    pred = (Tensor(xs) @ w1 + b1).tanh() @ w2 + b2
    diff = pred - ys
    mse = (diff * diff).mean()
    for p in params:
        p.grad = None
    T.backward(mse)
    for p in params:
        p.data -= 0.1 * p.grad
    if step % 250 == 0 or step == 999:
        print(f"step {step:3d}  mse {mse.item():.5f}")

assert mse.item() < 2e-3
print("fit converged; the whole model above is numpy plus the tape.")

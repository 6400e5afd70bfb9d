"""
The autodiff underneath everything
==================================

Every loss in this package backpropagates through a small tape-based
Tensor class over float64 numpy arrays. This script pokes at it directly:
build an expression, call backward, and check the result against central
finite differences.
"""

import numpy as np

from tinyumm import Tensor, no_grad
from tinyumm import tensor as T

rng = np.random.default_rng(0)

# ---------------------------------------------------------------- a scalar loss

w = T.param(rng.normal(size=(3, 4)))
x = Tensor(rng.normal(size=(5, 3)))
y = rng.normal(size=(5, 4))

def loss_value():
    with no_grad():
        return T.mse(T.silu(T.matmul(x, w)), Tensor(y)).item()

loss = T.mse(T.silu(T.matmul(x, w)), Tensor(y))
loss.backward()
analytic = w.grad.copy()

# central differences, one coordinate at a time
h = 1e-6
fd = np.zeros_like(w.data)
for i in range(w.data.shape[0]):
    for j in range(w.data.shape[1]):
        keep = w.data[i, j]
        w.data[i, j] = keep + h
        up = loss_value()
        w.data[i, j] = keep - h
        down = loss_value()
        w.data[i, j] = keep
        fd[i, j] = (up - down) / (2 * h)

err = np.max(np.abs(fd - analytic) / np.maximum(np.abs(fd), 1e-8))
print(f"max relative gradient error vs finite differences: {err:.2e}")
assert err < 1e-6

# ------------------------------------------------- gradients through reshaping

# depth-to-space (the decoder's upsampler, T.pixel_shuffle) is nothing more
# than a reshape, a transpose, and another reshape. Build it by hand and the
# gradient flows through the composition for free.
z = T.param(rng.normal(size=(1, 8, 2, 2)))
c = 8 // 4
s = T.reshape(z, (1, c, 2, 2, 2, 2))
s = T.transpose(s, (0, 1, 4, 2, 5, 3))
up = T.reshape(s, (1, c, 4, 4))
print(f"depth-to-space: {z.shape} -> {up.shape}")
assert np.array_equal(up.data, T.pixel_shuffle(z, 2).data)

T.scale(T.tsum(T.mul(up, up)), 0.5).backward()
assert np.allclose(z.grad, z.data)   # d/dz of 0.5*sum(up^2) is z itself
print("hand-rolled version matches T.pixel_shuffle, gradient included")

# ------------------------------------------------------------ fitting a line

# two parameters, a hundred gradient steps, no optimizer class needed
a = T.param(np.zeros(1))
b = T.param(np.zeros(1))
xs = Tensor(np.linspace(-1, 1, 50)[:, None])
ys = 3.0 * xs.data - 0.5

for step in range(100):
    a.grad = None
    b.grad = None
    pred = T.add(T.mul(xs, a), b)
    err_t = T.mse(pred, Tensor(ys))
    err_t.backward()
    a.data -= 0.5 * a.grad
    b.data -= 0.5 * b.grad

print(f"fit y = 3x - 0.5: a={a.data[0]:.4f} b={b.data[0]:.4f}")

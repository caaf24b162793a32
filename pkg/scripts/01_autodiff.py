"""
Reverse-mode gradients on a tape
================================

Watch a few arrays, build a scalar from them, then ask the tape for
gradients and compare against finite differences.
"""

import numpy as np

from crvae import autograd as ad

# watched arrays become leaves; every op on them is recorded
tape = ad.Tape()
w = tape.watch(np.array([[0.5, -1.0], [2.0, 0.3]]))
x = tape.watch(np.array([[1.0, 2.0]]))
loss = ad.sum(ad.sigmoid(x @ w) * 3.0)
grads = ad.backward(tape, loss)
print("loss", loss.item())
print("dL/dw\n", grads[w.node].data)

# central differences agree to ~1e-10
h = 1e-6
num = np.zeros((2, 2))
for i in range(2):
    for j in range(2):
        wp, wm = w.numpy().copy(), w.numpy().copy()
        wp[i, j] += h
        wm[i, j] -= h
        f = lambda m: ad.sum(ad.sigmoid(ad.Tensor(x.numpy()) @ ad.Tensor(m)) * 3.0).item()
        num[i, j] = (f(wp) - f(wm)) / (2 * h)
print("max abs diff vs finite differences", np.abs(num - grads[w.node].data).max())

# only scalar-with-array broadcasting is allowed
try:
    ad.add(np.zeros((2, 3)), np.zeros(3))
except ad.ShapeError as exc:
    print("rejected:", exc)

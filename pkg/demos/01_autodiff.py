"""Reverse-mode differentiation on the tape, checked against finite differences.

Run: python demos/01_autodiff.py
"""

import numpy as np

from bidganet.nn import conv2d, maxpool2
from bidganet.oracles import central_diff, rel_error
from bidganet.tensor import GradTape, Tensor, mul, relu, sum_all

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
proj = rng.standard_normal((1, 3, 3, 3))


def loss_of(xd, wd):
    # conv -> relu -> pool, reduced to a scalar by a fixed random projection
    y = maxpool2(relu(conv2d(Tensor(xd), Tensor(wd), padding=1)))
    return float(sum_all(mul(y, proj)).data)


# Ops executed inside the context are recorded; backward replays them once.
with GradTape() as tape:
    y = maxpool2(relu(conv2d(x, w, padding=1)))
    loss = sum_all(mul(y, proj))
print(f"recorded {len(tape)} ops, loss = {loss.item():.6f}")
tape.backward(loss)

# Central differences in float64 serve as the reference.
num_w = central_diff(lambda: loss_of(x.data, w.data), w.data)
num_x = central_diff(lambda: loss_of(x.data, w.data), x.data)
print(f"weight gradient rel. error: {rel_error(w.grad, num_w):.2e}")
print(f"input gradient rel. error:  {rel_error(x.grad, num_x):.2e}")

# Outside a tape nothing is recorded, which is how inference stays lean.
z = relu(x)
print("recorded outside a tape:", z.requires_grad)

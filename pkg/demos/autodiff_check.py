"""Backprop through a small graph and compare against central differences."""

import numpy as np

from ssvtcn.nn_core import Tensor, backward, finite_diff_grad, relative_error, softmax

rng = np.random.default_rng(0)
w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
x = rng.normal(size=(4, 5))


def loss_of(weights):
    probs = softmax(Tensor(x) @ weights)
    return -(probs[:, 0].log()).mean()


loss = loss_of(w)
backward(loss)
numeric = finite_diff_grad(lambda v: loss_of(Tensor(v)).item(), w.data)
print(f"loss            {loss.item():.6f}")
print(f"relative error  {relative_error(w.grad, numeric):.2e}")

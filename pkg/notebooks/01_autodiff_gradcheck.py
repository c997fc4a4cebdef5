"""
Reverse-mode autodiff on numpy arrays
=====================================

Build a small graph by hand, backpropagate through it, and compare every
registered backward rule against central finite differences.
"""

import numpy as np

from moodtheme import autodiff as ad
from moodtheme.autodiff import Tensor

# a two-layer perceptron on four inputs
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 3)))
w1 = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
w2 = Tensor(rng.normal(size=(1, 5)), requires_grad=True)
h = ad.relu(ad.linear(x, w1))
loss = ad.mean(ad.sigmoid(ad.linear(h, w2)))
ad.backward(loss)
print("loss", float(loss.data))
print("dL/dw2", w2.grad.ravel())

# finite-difference check of the whole composite
err = ad.check_function(lambda ts: ad.mean(ad.sigmoid(ad.linear(ad.relu(ad.linear(x, ts[0])), ts[1]))),
                        [w1.data, w2.data])
print(f"composite max relative error {err:.2e}")

# the per-op suite, the same one the gradcheck subcommand runs
for report in ad.grad_check_suite():
    print(report)

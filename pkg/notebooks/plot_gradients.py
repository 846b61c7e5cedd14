"""
Checking reverse-mode gradients
===============================

Every op records a backward closure on the tape. The finite-difference
checker compares the tape's gradient with a central difference taken in
float64.
"""

import numpy as np

from ptune import autodiff as ad
from ptune.autodiff import Tape, Tensor, finite_difference_check

rng = np.random.default_rng(0)

# a scalar function of one tensor: softmax attention weights against a fixed query
q = rng.normal(size=(4, 1))
keys = rng.normal(size=(5, 4))
w = rng.normal(size=(5, 1))


def f(x):
    scores = ad.transpose(ad.matmul(x, Tensor(q)))
    return ad.sum(ad.matmul(ad.softmax(scores), Tensor(w)))


print("softmax-attention rel. error:", finite_difference_check(f, keys))

# backward by hand: gradient of sum(tanh(x)) is 1 - tanh(x)^2
x = Tensor(rng.normal(size=(3,)), requires_grad=True)
with Tape() as tape:
    y = ad.sum(ad.tanh(x))
    tape.backward(y)
print("tape    :", x.grad)
print("by hand :", 1 - np.tanh(x.data) ** 2)

# an LSTM cell, the recurrent step inside the prompt encoder
from ptune.prompt import lstm_cell

d, H = 3, 4
w_x, w_h, b = (rng.normal(size=s) * 0.5 for s in [(d, 4 * H), (H, 4 * H), (4 * H,)])
h0, c0 = rng.normal(size=(1, H)), rng.normal(size=(1, H))


def cell(inp):
    h, c = lstm_cell(inp, Tensor(h0), Tensor(c0), Tensor(w_x), Tensor(w_h), Tensor(b))
    return ad.sum(ad.mul(h, h))


print("lstm cell rel. error:", finite_difference_check(cell, rng.normal(size=(1, d))))

"""
Reverse-mode differentiation on a tape
======================================

Every operation in ``cmadm.tensor`` appends a node to the active tape.
Calling ``backward`` walks the tape once in reverse and returns gradients
keyed by node id.  Here we differentiate a small two-layer network and
compare against central differences.
"""

import numpy as np

from cmadm import tensor as T
from cmadm.gradcheck import numerical_gradient, relative_error

rng = np.random.default_rng(0)
x = T.Tensor(rng.normal(size=(4, 3)))
w1 = T.parameter(rng.normal(size=(3, 5)) * 0.5)
w2 = T.parameter(rng.normal(size=(5, 2)) * 0.5)
target = np.array([0, 1, 1, 0])


def loss():
    h = T.tanh(T.matmul(x, w1))
    logp = T.log_softmax(T.matmul(h, w2))
    return T.scale(T.sum_all(T.pick_last(logp, target)), -1.0 / len(target))


with T.Tape() as tape:
    value = loss()
grads = tape.backward(value)
print(f"loss = {value.item():.6f}, tape length = {len(tape)}")

# %%
# Finite differences perturb each weight in place and re-run the forward pass.
for name, p in [("w1", w1), ("w2", w2)]:
    err = relative_error(grads[p.node_id], numerical_gradient(loss, p))
    print(f"{name}: relative error vs central differences {err:.2e}")

# %%
# Outside a tape nothing is recorded, which is how decoding runs.
with T.no_grad():
    print("no-grad forward:", loss().item())

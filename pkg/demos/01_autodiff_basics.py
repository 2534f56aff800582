"""
Reverse-mode gradients on small array graphs
============================================

Builds a few tiny computation graphs out of Value nodes, runs backward,
and checks every gradient against central finite differences.
"""

import numpy as np

from costdet import autodiff as ad

# a Value wraps a float64 array; operations record their inputs so that
# backward() can replay the chain rule in reverse topological order
x = ad.Value(np.array([[0.5, -1.0, 2.0]]), requires_grad=True)
w = ad.Value(np.array([[0.3], [0.7], [-0.2]]), requires_grad=True)
y = ad.sum_reduce(ad.sigmoid(ad.matmul(x, w)))
y.backward()
print("forward value:", y.data)
print("dy/dx:", x.grad)
print("dy/dw:", w.grad.ravel())

# the same gradient, measured numerically: nudge one entry of w by h in
# both directions and take the symmetric difference quotient
h = 1e-5


def forward(w_data):
    wv = ad.Value(w_data)
    return ad.sum_reduce(ad.sigmoid(ad.matmul(ad.Value(x.data), wv))).data.item()


numeric = np.zeros(3)
for i in range(3):
    bumped = w.data.copy()
    bumped[i, 0] += h
    hi = forward(bumped)
    bumped[i, 0] -= 2 * h
    lo = forward(bumped)
    numeric[i] = (hi - lo) / (2 * h)

print("numeric dy/dw:", numeric)
print("max abs difference:", np.abs(numeric - w.grad.ravel()).max())

# gradients accumulate across uses of the same node; a node feeding two
# branches receives the sum of both downstream contributions
a = ad.Value(np.array([[1.5]]), requires_grad=True)
both = ad.add(ad.mul(a, 3.0), ad.mul(a, a))  # 3a + a^2, da = 3 + 2a = 6
ad.sum_reduce(both).backward()
print("d(3a + a^2)/da at a=1.5:", a.grad.item(), "(expected 6.0)")

# named parameters live in a ParamStore; backward(loss, store) zeroes the
# stored grads first and sgd_step applies theta <- theta - lr * grad
store = ad.ParamStore(rng_seed=0)
theta = store.add_normal("demo.w", (3, 1), 0.5)
loss = ad.mean_reduce(ad.matmul(ad.Value(x.data), theta))
grads = ad.backward(loss, store)
before = theta.data.copy()
store.sgd_step(0.1)
print("sgd moved demo.w by:", (theta.data - before).ravel())
print("which is -0.1 * grad:", (-0.1 * grads["demo.w"]).ravel())

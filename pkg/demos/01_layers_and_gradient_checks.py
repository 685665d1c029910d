"""Tour of the layer primitives and their gradient verification.

Every layer carries an explicit backward pass; this script exercises the
forward contracts and validates each backward against central finite
differences.
"""

import numpy as np

from muda import Parameter, cross_entropy, grad_check, one_hot, softmax
from muda.layers import BatchNorm, Dense, Dropout, ReLU, Softmax

rng = np.random.default_rng(0)

# --- a dense layer is just y = x @ W + b ----------------------------------
dense = Dense(3, 2, weight=rng.normal(size=(3, 2)), bias=np.zeros(2))
x = rng.normal(size=(4, 3))
print("dense output:\n", dense.forward(x))

# --- inverted dropout: inactive is the identity, active rescales ----------
drop = Dropout(0.5)
drop.active = False
print("\ninactive dropout returns its input unchanged:",
      drop.forward(x) is x)
drop.active = True
masked = drop.forward(x, np.random.default_rng(1))
print("active dropout zeroes about half and doubles the rest:\n", masked[0])

# --- softmax is stable at extreme logits -----------------------------------
print("\nsoftmax([1000, 0]) =", softmax(np.array([[1000.0, 0.0]]))[0])

# --- cross entropy returns the fused gradient w.r.t. logits ----------------
scores = softmax(rng.normal(size=(4, 2)))
labels = one_hot(np.array([0, 1, 1, 0]), 2)
loss, grad_logits = cross_entropy(scores, labels)
print("\ncross entropy:", round(loss, 4), "gradient shape:", grad_logits.shape)

# --- every backward is checked against finite differences ------------------
# Build a tiny stack, define a scalar probe loss, and compare the
# analytic gradient of every parameter (and the input) with a central
# difference quotient.
layers = [
    Dense(3, 8, weight=rng.normal(size=(3, 8)) * 0.5, name="d1"),
    BatchNorm(8),
    ReLU(),
    Dense(8, 2, weight=rng.normal(size=(8, 2)) * 0.5, bias=np.zeros(2), name="d2"),
    Softmax(),
]
layers[1].update_running = False
probe = rng.normal(size=(4, 2))
x_param = Parameter(rng.normal(size=(4, 3)), "input")
params = [x_param] + [p for l in layers for p in l.params()]


def loss_fn():
    for p in params:
        p.zero_grad()
    out = x_param.value
    for layer in layers:
        layer.training = True
        out = layer.forward(out)
    loss = float((out * probe).sum())
    grad = probe
    for layer in reversed(layers):
        grad = layer.backward(grad)
    x_param.grad += grad
    return loss


err = grad_check(loss_fn, params)
print(f"\nmax relative gradient error across {len(params)} tensors: {err:.2e}")
assert err < 1e-4
print("gradients verified.")

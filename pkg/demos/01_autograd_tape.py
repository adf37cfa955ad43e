"""
==============================
A define-then-run gradient tape
==============================

Build a small graph once, bind values, and read gradients back by leaf name.
The same tape is re-run with new bindings, which is how the trainers use it.
"""
import numpy as np

from oodforge.autograd import Tape, finite_difference

rng = np.random.default_rng(0)

# a one-hidden-layer network with a log-softmax head
tape = Tape()
x = tape.leaf("x")
hidden = tape.relu(tape.add(tape.matmul(x, tape.leaf("W0")), tape.leaf("b0")))
log_probs = tape.log_softmax(tape.matmul(hidden, tape.leaf("W1")))
loss = tape.neg(tape.mean(tape.sum(tape.mul(log_probs, tape.leaf("onehot")), axis=1)))

values = {
    "x": rng.normal(size=(5, 3)),
    "W0": rng.normal(size=(3, 8)) * 0.5,
    "b0": np.zeros(8),
    "W1": rng.normal(size=(8, 4)) * 0.5,
    "onehot": np.eye(4)[rng.integers(0, 4, 5)],
}
tape.forward(values)
print("cross entropy:", float(tape.value(loss)))

grads = tape.backward(loss, ["W0", "W1", "x"])
for name, g in grads.items():
    print(f"d loss / d {name}: shape {g.shape}, norm {np.linalg.norm(g):.4f}")


# central differences agree with the reverse pass
def loss_at(w1):
    tape.forward({**values, "W1": w1})
    return float(tape.value(loss))


numeric = finite_difference(loss_at, values["W1"])
print("max |analytic - numeric| for W1:", np.abs(numeric - grads["W1"]).max())

# guided backpropagation only lets positive signal through the relus
tape.forward(values)
guided = tape.backward(loss, ["x"], guided=True)["x"]
print("standard vs guided input gradient, first row:")
print(np.round(grads["x"][0], 4), np.round(guided[0], 4))

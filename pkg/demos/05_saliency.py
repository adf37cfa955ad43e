"""
======================================
Input sensitivity of a trained classifier
======================================

The gradient of the top-1 log-probability with respect to the input shows
how strongly the prediction depends on each coordinate.  Guided
backpropagation keeps only positive signal at each ReLU.  On separable 2D
classes the prediction saturates on the data itself, so the gradient is
largest near the decision boundary and wherever confidence is still moving.
"""
import numpy as np

from oodforge.data import make_preset
from oodforge.detect import baseline_score
from oodforge.nets import saliency_map
from oodforge.training import TrainConfig, train_classifier

train_in = make_preset("fig5-in", 1000, 0)
seen_ood = make_preset("fig5-ood-near", 100, 1)
models = {
    "xent": train_classifier(TrainConfig(epochs=40, batch_size=64, lr=0.005), train_in, hidden=64),
    "confidence": train_classifier(TrainConfig(loss_kind="confidence", epochs=40, batch_size=64, lr=0.005),
                                   train_in, seen_ood, hidden=64),
}

# walk from one class centre through the boundary and out past the box
probe = np.c_[np.array([-10.0, -4.0, -1.0, 0.0, 1.0, 4.0, 10.0, 18.0, 30.0, 45.0]), np.full(10, 3.0)]
for name, rep in models.items():
    theta = rep.params["classifier"]
    conf = baseline_score(theta, probe)
    plain = np.linalg.norm(saliency_map(theta, probe), axis=1)
    guided = np.linalg.norm(saliency_map(theta, probe, guided=True), axis=1)
    print(f"\n{name}")
    print(f"{'x':>6} {'max-softmax':>12} {'|grad|':>10} {'|guided|':>10}")
    for x, c, g, gg in zip(probe[:, 0], conf, plain, guided):
        print(f"{x:6.1f} {c:12.4f} {g:10.2e} {gg:10.2e}")

"""
=====================================
Scoring, thresholds and detection metrics
=====================================

Train a small classifier, score in-distribution and far-away points with the
max-softmax baseline, ODIN and a K+1 head, then summarise each detector with
TNR at 95% TPR, AUROC, AUPR, detection accuracy and calibration error.
"""
import numpy as np

from oodforge.data import make_preset
from oodforge.detect import DetectorConfig, detect, score
from oodforge.metrics import ece, evaluate_detection
from oodforge.nets import classifier_logits, classifier_log_probs
from oodforge.training import TrainConfig, train_classifier

train_in = make_preset("fig5-in", 1000, 0)
seen_ood = make_preset("fig5-ood-near", 100, 1)
test_in = make_preset("fig5-in", 500, 2)
test_out = make_preset("fig5-annulus", 500, 3)

cfg = dict(epochs=40, batch_size=64, lr=0.005)
models = {
    "xent": train_classifier(TrainConfig(**cfg), train_in, hidden=64),
    "confidence": train_classifier(TrainConfig(loss_kind="confidence", beta=1.0, **cfg), train_in, seen_ood,
                                   hidden=64),
    "kplus1": train_classifier(TrainConfig(loss_kind="kplus1", **cfg), train_in, seen_ood, hidden=64),
}

detectors = {
    "xent": [DetectorConfig("baseline"), DetectorConfig("odin", T=1000.0, eps=0.01)],
    "confidence": [DetectorConfig("baseline")],
    "kplus1": [DetectorConfig("kplus1")],
}
print(f"{'model':>10} {'detector':>20} {'TNR@95':>7} {'AUROC':>6} {'AUPRin':>6} {'AUPRout':>7} {'acc':>6}")
for name, rep in models.items():
    theta = rep.params["classifier"]
    for det in detectors[name]:
        r = evaluate_detection(score(theta, test_in.inputs, det), score(theta, test_out.inputs, det))
        label = det.kind if det.kind != "odin" else f"odin T={det.T:g} eps={det.eps:g}"
        print(f"{name:>10} {label:>20} {r.tnr_at_tpr95:7.3f} {r.auroc:6.3f} {r.aupr_in:6.3f} "
              f"{r.aupr_out:7.3f} {r.detection_accuracy:6.3f}")

# a threshold turns scores into decisions
theta = models["confidence"].params["classifier"]
s_in = score(theta, test_in.inputs, DetectorConfig())
delta = np.quantile(s_in, 0.05)
flagged = 1 - detect(score(theta, test_out.inputs, DetectorConfig()), delta)
print(f"threshold {delta:.3f} keeps 95% of test data and flags {flagged.mean():.1%} of far points")

# calibration on held-out in-distribution data
probs = np.exp(classifier_log_probs(theta, test_in.inputs))
correct = classifier_logits(theta, test_in.inputs).argmax(axis=1) == test_in.labels
cal = ece(probs.max(axis=1), correct, n_bins=20)
print(f"expected calibration error {cal.ece:.4f} over {sum(c > 0 for c in cal.counts)} occupied bins")

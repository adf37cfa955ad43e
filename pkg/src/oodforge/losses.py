"""Scalar training objectives.

Each objective is a small graph on a :class:`~oodforge.autograd.Tape`.  The
``*_graph`` builders return an :class:`Objective` whose leaves are network
parameters (``C.*``, ``G.*``, ``D.*``) and data (``x_in``, ``onehot_in``,
``x_out``, ``x_real``, ``x_fake``, ``z``).  Trainers bind a mini-batch and call
:meth:`Objective.value_and_grad`; the module-level loss functions bind whole
batches and report a :class:`LossValue`.

All batch reductions are means.  KL terms are ``KL(U || P(.|x))`` computed as
``-log K - mean_y log P(y|x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Node, Tape
from .nets import D_CLAMP, MlpSpec, ParamSet, mlp_on_tape

__all__ = [
    "LossValue",
    "Objective",
    "cross_entropy_node",
    "kl_uniform_node",
    "pull_away_node",
    "confidence_graph",
    "kplus1_graph",
    "discriminator_graph",
    "generator_graph",
    "cross_entropy",
    "kl_uniform",
    "confidence_loss",
    "gan_loss_d",
    "gan_loss_g_original",
    "joint_gan_generator_loss",
    "joint_classifier_loss",
    "pull_away",
    "kplus1_loss",
    "onehot",
]


@dataclass
class LossValue:
    value: float
    terms: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def weighted_sum(self) -> float:
        return float(sum(self.weights.get(k, 1.0) * v for k, v in self.terms.items()))

    def as_dict(self) -> dict[str, float]:
        return {"value": self.value, **self.terms}


@dataclass
class Objective:
    tape: Tape
    root: Node
    terms: dict[str, Node]
    weights: dict[str, float]

    def evaluate(self, bindings) -> LossValue:
        self.tape.forward(bindings)
        return self._loss_value()

    def _loss_value(self) -> LossValue:
        return LossValue(
            float(self.tape.value(self.root)),
            {k: float(self.tape.value(n)) for k, n in self.terms.items()},
            dict(self.weights),
        )

    def value_and_grad(self, bindings, leaves, guided=False):
        self.tape.forward(bindings)
        return self._loss_value(), self.tape.backward(self.root, leaves, guided=guided)


def onehot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return np.eye(k)[labels.astype(int)]


# -- node builders ----------------------------------------------------------

def cross_entropy_node(tape: Tape, log_probs: Node, onehot_labels: Node) -> Node:
    picked = tape.sum(tape.mul(log_probs, onehot_labels), axis=1)
    return tape.neg(tape.mean(picked))


def kl_uniform_node(tape: Tape, log_probs: Node, k: int) -> Node:
    return tape.shift(tape.neg(tape.mean(log_probs)), -np.log(k))


def _combine(tape: Tape, terms: dict[str, Node], weights: dict[str, float]) -> Node:
    root = None
    for name, node in terms.items():
        w = weights.get(name, 1.0)
        part = node if w == 1.0 else tape.scale(node, w)
        root = part if root is None else tape.add(root, part)
    return root


def pull_away_node(tape: Tape, samples: Node) -> Node:
    """Mean squared cosine similarity over ordered pairs i != j.

    The diagonal is removed with a constant off-diagonal mask, so the graph
    needs the batch size ``m`` at build time; see :func:`pull_away`.
    """
    gram = tape.matmul(samples, tape.transpose(samples))
    sq_norm = tape.sum(tape.square(samples), axis=1, keepdims=True)
    denom = tape.matmul(sq_norm, tape.transpose(sq_norm))
    cos2 = tape.div(tape.square(gram), denom)
    mask = tape.leaf("pt_mask")
    return tape.mean(tape.mul(cos2, mask))


def _pt_mask(m: int) -> np.ndarray:
    # mean over all m*m entries of the masked matrix, rescaled to 1/(m(m-1))
    return (1.0 - np.eye(m)) * (m / (m - 1.0))


def _disc_logs(tape: Tape, d_spec: MlpSpec, x: Node) -> tuple[Node, Node]:
    p = tape.clip(mlp_on_tape(tape, d_spec, "D.", x), D_CLAMP, 1.0 - D_CLAMP)
    log_d = tape.log(p)
    log_1md = tape.log(tape.shift(tape.neg(p), 1.0))
    return log_d, log_1md


# -- graph builders ---------------------------------------------------------

def confidence_graph(spec: MlpSpec, beta: float = 0.0, with_out: bool = True) -> Objective:
    """Cross entropy on ``x_in`` plus ``beta`` times KL-to-uniform on ``x_out``.

    The two batches are pushed through separate copies of the network that
    share parameter leaves, so ``beta = 0`` reproduces plain cross-entropy
    gradients bit for bit.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    tape = Tape()
    k = spec.output_dim
    logp_in = tape.log_softmax(mlp_on_tape(tape, spec, "C.", tape.leaf("x_in")))
    terms = {"ce": cross_entropy_node(tape, logp_in, tape.leaf("onehot_in"))}
    weights = {"ce": 1.0}
    if with_out:
        logp_out = tape.log_softmax(mlp_on_tape(tape, spec, "C.", tape.leaf("x_out")))
        terms["kl"] = kl_uniform_node(tape, logp_out, k)
        weights["kl"] = float(beta)
    return Objective(tape, _combine(tape, terms, weights), terms, weights)


def kplus1_graph(spec: MlpSpec, with_out: bool = True) -> Objective:
    """Cross entropy on labeled ``x_in`` plus cross entropy to class K on ``x_out``."""
    tape = Tape()
    k1 = spec.output_dim
    logp_in = tape.log_softmax(mlp_on_tape(tape, spec, "C.", tape.leaf("x_in")))
    terms = {"ce_in": cross_entropy_node(tape, logp_in, tape.leaf("onehot_in"))}
    if with_out:
        logp_out = tape.log_softmax(mlp_on_tape(tape, spec, "C.", tape.leaf("x_out")))
        ood_col = np.zeros(k1)
        ood_col[k1 - 1] = 1.0
        terms["ce_out"] = tape.neg(tape.mean(tape.sum(tape.mul(logp_out, tape.const(ood_col)), axis=1)))
    weights = {name: 1.0 for name in terms}
    return Objective(tape, _combine(tape, terms, weights), terms, weights)


def discriminator_graph(d_spec: MlpSpec, g_spec: MlpSpec | None = None) -> Objective:
    """``mean log D(x_real) + mean log(1 - D(fake))``; the discriminator ascends it.

    Fakes enter as leaf ``x_fake``, or as ``G(z)`` when `g_spec` is given.
    """
    tape = Tape()
    fake = mlp_on_tape(tape, g_spec, "G.", tape.leaf("z")) if g_spec else tape.leaf("x_fake")
    log_d_real, _ = _disc_logs(tape, d_spec, tape.leaf("x_real"))
    _, log_1md_fake = _disc_logs(tape, d_spec, fake)
    terms = {"real": tape.mean(log_d_real), "fake": tape.mean(log_1md_fake)}
    weights = {"real": 1.0, "fake": 1.0}
    return Objective(tape, _combine(tape, terms, weights), terms, weights)


def generator_graph(
    d_spec: MlpSpec,
    g_spec: MlpSpec | None = None,
    c_spec: MlpSpec | None = None,
    beta: float = 0.0,
    surrogate: bool = False,
    pt_weight: float | None = None,
) -> Objective:
    """Generator objective: GAN term, plus ``beta`` KL-to-uniform through the classifier.

    The GAN term is the saturating ``mean log(1 - D(fake))``, or
    ``-mean log D(fake)`` with ``surrogate=True``.  The KL term is present only when `c_spec` is given, the pull-away term only when
    `pt_weight` is not None (bind ``pt_mask`` via :func:`pt_bindings`).
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    tape = Tape()
    fake = mlp_on_tape(tape, g_spec, "G.", tape.leaf("z")) if g_spec else tape.leaf("x_fake")
    log_d, log_1md = _disc_logs(tape, d_spec, fake)
    terms = {"gan_g": tape.neg(tape.mean(log_d)) if surrogate else tape.mean(log_1md)}
    weights = {"gan_g": 1.0}
    if c_spec is not None:
        logp = tape.log_softmax(mlp_on_tape(tape, c_spec, "C.", fake))
        terms["kl"] = kl_uniform_node(tape, logp, c_spec.output_dim)
        weights["kl"] = float(beta)
    if pt_weight is not None:
        terms["pt"] = pull_away_node(tape, fake)
        weights["pt"] = float(pt_weight)
    return Objective(tape, _combine(tape, terms, weights), terms, weights)


def pt_bindings(m: int) -> dict[str, np.ndarray]:
    if m < 2:
        raise ValueError("pull-away term needs at least two samples")
    return {"pt_mask": _pt_mask(m)}


# -- evaluation entry points ------------------------------------------------

def _log_probs_tape(log_probs) -> tuple[Tape, Node, np.ndarray]:
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ValueError("log_probs must be an N x K matrix")
    tape = Tape()
    return tape, tape.leaf("log_probs"), lp


def cross_entropy(log_probs, labels) -> LossValue:
    tape, node, lp = _log_probs_tape(log_probs)
    root = cross_entropy_node(tape, node, tape.leaf("onehot"))
    tape.forward({"log_probs": lp, "onehot": onehot(labels, lp.shape[1])})
    v = float(tape.value(root))
    return LossValue(v, {"ce": v}, {"ce": 1.0})


def kl_uniform(log_probs) -> LossValue:
    tape, node, lp = _log_probs_tape(log_probs)
    mass = np.exp(lp).sum(axis=1)
    if np.any(np.abs(mass - 1.0) > 1e-9):
        raise ValueError("each row of log_probs must exponentiate to a distribution")
    root = kl_uniform_node(tape, node, lp.shape[1])
    tape.forward({"log_probs": lp})
    v = float(tape.value(root))
    return LossValue(v, {"kl": v}, {"kl": 1.0})


def _in_bindings(theta: ParamSet, x_in, y_in) -> dict:
    x_in = np.asarray(x_in, dtype=np.float64)
    if len(x_in) == 0:
        raise ValueError("in-distribution batch is empty")
    return {**theta.named(), "x_in": x_in, "onehot_in": onehot(y_in, theta.spec.output_dim)}


def confidence_loss(theta: ParamSet, x_in, y_in, x_out, beta: float) -> LossValue:
    x_out = np.asarray(x_out, dtype=np.float64)
    obj = confidence_graph(theta.spec, beta, with_out=len(x_out) > 0)
    return obj.evaluate({**_in_bindings(theta, x_in, y_in), "x_out": x_out})


def joint_classifier_loss(theta: ParamSet, x_in, y_in, x_gen, beta: float) -> LossValue:
    return confidence_loss(theta, x_in, y_in, x_gen, beta)


def kplus1_loss(theta: ParamSet, x_in, y_in, x_out) -> LossValue:
    x_out = np.asarray(x_out, dtype=np.float64)
    k = theta.spec.output_dim - 1
    y_in = np.asarray(y_in)
    if y_in.size and (y_in.min() < 0 or y_in.max() >= k):
        raise ValueError(f"in-distribution labels must lie in [0, {k}) for a K+1 classifier")
    obj = kplus1_graph(theta.spec, with_out=len(x_out) > 0)
    return obj.evaluate({**_in_bindings(theta, x_in, y_in), "x_out": x_out})


def gan_loss_d(D: ParamSet, x_real, x_fake) -> LossValue:
    obj = discriminator_graph(D.spec)
    return obj.evaluate({**D.named(), "x_real": np.asarray(x_real, float),
                         "x_fake": np.asarray(x_fake, float)})


def gan_loss_g_original(D: ParamSet, x_fake, surrogate: bool = False) -> LossValue:
    obj = generator_graph(D.spec, surrogate=surrogate)
    return obj.evaluate({**D.named(), "x_fake": np.asarray(x_fake, float)})


def joint_gan_generator_loss(
    theta: ParamSet, D: ParamSet, x_fake, beta: float,
    surrogate: bool = False, pt_weight: float | None = None,
) -> LossValue:
    x_fake = np.asarray(x_fake, float)
    obj = generator_graph(D.spec, None, theta.spec, beta, surrogate, pt_weight)
    bindings = {**D.named(), **theta.named(), "x_fake": x_fake}
    if pt_weight is not None:
        bindings.update(pt_bindings(len(x_fake)))
    return obj.evaluate(bindings)


def pull_away(samples) -> LossValue:
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 2 or len(s) < 2:
        raise ValueError("pull-away term needs an M x d batch with M >= 2")
    if np.any(np.sum(s * s, axis=1) == 0):
        raise ValueError("pull-away term is undefined for zero-norm rows")
    tape = Tape()
    root = pull_away_node(tape, tape.leaf("s"))
    tape.forward({"s": s, **pt_bindings(len(s))})
    v = float(tape.value(root))
    return LossValue(v, {"pt": v}, {"pt": 1.0})

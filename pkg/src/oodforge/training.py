"""Adam, classifier training, the alternating classifier/GAN loop and the beta sweep.

Every run is a pure function of its arguments.  Randomness comes from
independent streams derived from ``config.seed`` and a fixed tag per purpose
(initialisation, shuffling, OOD batches, latent draws), so changing one
consumer never perturbs another.  In particular the classifier's batch
schedule is identical between :func:`train_classifier` and
:func:`train_joint` for equal seeds.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset
from .losses import (
    LossValue,
    confidence_graph,
    discriminator_graph,
    generator_graph,
    kplus1_graph,
    onehot,
    pt_bindings,
)
from .nets import (
    LatentPrior,
    MlpSpec,
    ParamSet,
    generate,
    init_params,
    toy_classifier_spec,
    toy_discriminator_spec,
    toy_generator_spec,
)

__all__ = [
    "TrainConfig",
    "TrainReport",
    "NumericalError",
    "Adam",
    "adam_step",
    "train_classifier",
    "train_joint",
    "train_gan",
    "beta_sweep",
    "SweepResult",
    "BETA_GRID",
    "FIG5_HIDDEN",
    "TOY_GAN_HIDDEN",
    "fig5_config",
    "toy_gan_config",
]

logger = logging.getLogger(__name__)

BETA_GRID = tuple(round(0.1 * i, 1) for i in range(21))

_TAGS = {"clf_init": 1, "clf_shuffle": 2, "ood": 3, "gen_init": 4, "disc_init": 5,
         "disc_shuffle": 6, "z": 7}


class NumericalError(ArithmeticError):
    pass


def _stream(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), _TAGS[tag]])


def _seed_for(seed: int, tag: str) -> int:
    return int(np.random.SeedSequence([int(seed), _TAGS[tag]]).generate_state(1)[0])


@dataclass
class TrainConfig:
    beta: float = 1.0
    batch_size: int = 400
    epochs: int = 100
    lr: float = 0.002
    lr_drop: tuple[float, int] | None = None
    adam: tuple[float, float, float] = (0.9, 0.999, 1e-8)
    seed: int = 0
    loss_kind: str = "xent"
    pt_weight: float | None = None
    generator_surrogate: bool = False
    beta_generator: float | None = None

    def __post_init__(self):
        b1, b2, eps = self.adam
        if not (0 <= b1 < 1 and 0 <= b2 < 1 and eps > 0):
            raise ValueError("Adam needs 0 <= beta1, beta2 < 1 and eps > 0")
        if self.beta < 0 or (self.beta_generator is not None and self.beta_generator < 0):
            raise ValueError("beta must be non-negative")
        if self.batch_size < 1 or self.epochs < 1 or not self.lr > 0:
            raise ValueError("batch_size, epochs and lr must be positive")
        if self.loss_kind not in ("xent", "confidence", "kplus1", "joint"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.lr_drop is not None:
            self.lr_drop = (float(self.lr_drop[0]), int(self.lr_drop[1]))
        self.adam = tuple(float(a) for a in self.adam)

    @classmethod
    def appendix_a(cls, **overrides) -> "TrainConfig":
        """100 epochs with the learning rate dropped by 0.1 at epoch 60."""
        return cls(**{"epochs": 100, "lr_drop": (0.1, 60), **overrides})

    def lr_at(self, epoch: int) -> float:
        if self.lr_drop is not None and epoch >= self.lr_drop[1]:
            return self.lr * self.lr_drop[0]
        return self.lr

    @property
    def generator_beta(self) -> float:
        return self.beta if self.beta_generator is None else self.beta_generator


# Desk-scale presets used by the demos and the acceptance runs.  The 2D
# detection classifier keeps the 2x500 architecture but takes more, smaller
# steps than the toy default (M=400), which does not flatten the far field in
# 100 epochs.
# The GAN preset narrows every network to 128 units and uses beta1 = 0.5, the
# usual GAN momentum; at beta1 = 0.9 the original GAN often diverges here.
FIG5_HIDDEN = 500
TOY_GAN_HIDDEN = 128


def fig5_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"batch_size": 128, "lr": 0.005, "epochs": 100, **overrides})


def toy_gan_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"batch_size": 100, "lr": 0.002, "epochs": 100,
                          "adam": (0.5, 0.999, 1e-8), **overrides})


@dataclass
class TrainReport:
    config: TrainConfig
    history: dict[str, list[dict[str, float]]]
    params: dict[str, ParamSet]
    wall_clock: float = 0.0

    @property
    def seed(self) -> int:
        return self.config.seed

    def to_json(self) -> str:
        # wall clock lives in the run manifest so reports stay byte-reproducible
        payload = {
            "config": asdict(self.config),
            "seed": self.config.seed,
            "epochs": len(next(iter(self.history.values()), [])),
            "history": self.history,
            "models": {role: list(p.spec.layer_widths) for role, p in self.params.items()},
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


class Adam:
    """Bias-corrected Adam over a dict of named arrays."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             sign: float = 1.0) -> dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = {}
        for name, p in params.items():
            g = grads[name] if sign == 1.0 else sign * grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            step = np.divide(m, denom, out=denom)
            step *= lr / c1
            out[name] = p - step
        return out


def adam_step(state: Adam, params: ParamSet, grads: dict[str, np.ndarray], lr: float) -> ParamSet:
    return params.with_named(state.step(params.named(), grads, lr))


def _check_finite(loss: LossValue, phase: str, epoch: int) -> None:
    if not math.isfinite(loss.value):
        raise NumericalError(f"non-finite {phase} loss {loss.value} at epoch {epoch}")


def _apply(params: ParamSet, values: dict[str, np.ndarray], phase: str, epoch: int) -> ParamSet:
    for name, v in values.items():
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"non-finite {phase} parameter {name} at epoch {epoch}")
    return params.with_named(values)


def _epoch_mean(rows: list[LossValue]) -> dict[str, float]:
    keys = rows[0].as_dict().keys()
    return {k: float(np.mean([r.as_dict()[k] for r in rows])) for k in keys}


def _batches(rng: np.random.Generator, n: int, m: int):
    perm = rng.permutation(n)
    return [perm[i:i + m] for i in range(0, n, m)]


class _Cycler:
    """Endless reshuffled batches of size ``min(m, n)`` over ``n`` rows."""

    def __init__(self, rng: np.random.Generator, n: int, m: int):
        self.rng, self.n, self.m = rng, n, min(m, n)
        self.queue = np.zeros(0, dtype=int)

    def next(self) -> np.ndarray:
        if len(self.queue) < self.m:
            self.queue = np.concatenate([self.queue, self.rng.permutation(self.n)])
        out, self.queue = self.queue[: self.m], self.queue[self.m:]
        return out


def _n_classes(in_data: Dataset) -> int:
    if in_data.labels is None:
        raise ValueError("in-distribution data must be labeled")
    return int(in_data.labels.max()) + 1


def train_classifier(
    config: TrainConfig,
    in_data: Dataset,
    out_data: Dataset | None = None,
    spec: MlpSpec | None = None,
    init: ParamSet | None = None,
    hidden: int = 500,
) -> TrainReport:
    """Mini-batch training with cross entropy, confidence loss or the K+1 loss.

    OOD batches are drawn by cycling reshuffled passes over `out_data`, of
    size ``min(batch_size, len(out_data))``.
    """
    kind = config.loss_kind
    if kind not in ("xent", "confidence", "kplus1"):
        raise ValueError("train_classifier handles xent, confidence and kplus1")
    needs_out = kind != "xent"
    if needs_out and (out_data is None or len(out_data) == 0):
        raise ValueError(f"loss kind {kind!r} requires out-of-distribution data")
    k = _n_classes(in_data)
    width = k + 1 if kind == "kplus1" else k
    if spec is None:
        spec = init.spec if init is not None else toy_classifier_spec(width, hidden, in_data.dims)
    if spec.output_dim != width:
        raise ValueError(f"classifier width {spec.output_dim} != required {width}")
    params = init.copy() if init is not None else init_params(
        spec, _seed_for(config.seed, "clf_init"), "classifier")

    if kind == "kplus1":
        obj = kplus1_graph(spec)
    else:
        obj = confidence_graph(spec, config.beta if kind == "confidence" else 0.0,
                               with_out=needs_out)
    shuffle = _stream(config.seed, "clf_shuffle")
    oods = _Cycler(_stream(config.seed, "ood"), len(out_data), config.batch_size) if needs_out else None
    labels_1h = onehot(in_data.labels, width)
    names = params.names()
    adam = Adam(*config.adam)
    history = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        rows = []
        for idx in _batches(shuffle, len(in_data), config.batch_size):
            bind = {**params.named(), "x_in": in_data.inputs[idx], "onehot_in": labels_1h[idx]}
            if oods is not None:
                bind["x_out"] = out_data.inputs[oods.next()]
            loss, grads = obj.value_and_grad(bind, names)
            _check_finite(loss, "classifier", epoch)
            params = _apply(params, adam.step(params.named(), grads, lr), "classifier", epoch)
            rows.append(loss)
        history.append(_epoch_mean(rows))
        logger.debug("epoch %d %s", epoch, history[-1])
    return TrainReport(config, {"classifier": history}, {"classifier": params},
                       time.perf_counter() - start)


def _alternating(
    config: TrainConfig,
    in_data: Dataset,
    classifier_spec: MlpSpec | None,
    generator_spec: MlpSpec,
    discriminator_spec: MlpSpec,
    prior: LatentPrior,
    init_classifier: ParamSet | None,
    init_generator: ParamSet | None,
    init_discriminator: ParamSet | None,
    update_classifier: bool,
) -> TrainReport:
    if prior.dim != generator_spec.input_dim:
        raise ValueError(f"prior dim {prior.dim} != generator input width {generator_spec.input_dim}")
    if generator_spec.output_dim != in_data.dims or discriminator_spec.input_dim != in_data.dims:
        raise ValueError("generator output and discriminator input must match the data dimension")
    seed = config.seed
    m = config.batch_size
    with_clf = classifier_spec is not None

    G = init_generator.copy() if init_generator else init_params(
        generator_spec, _seed_for(seed, "gen_init"), "generator")
    D = init_discriminator.copy() if init_discriminator else init_params(
        discriminator_spec, _seed_for(seed, "disc_init"), "discriminator")
    d_obj = discriminator_graph(discriminator_spec)
    g_obj = generator_graph(discriminator_spec, generator_spec,
                            classifier_spec if with_clf else None,
                            config.generator_beta, config.generator_surrogate, config.pt_weight)
    opt = {"discriminator": Adam(*config.adam), "generator": Adam(*config.adam)}
    hist: dict[str, list] = {"discriminator": [], "generator": []}

    if with_clf:
        k = _n_classes(in_data)
        C = init_classifier.copy() if init_classifier else init_params(
            classifier_spec, _seed_for(seed, "clf_init"), "classifier")
        c_obj = confidence_graph(classifier_spec, config.beta)
        labels_1h = onehot(in_data.labels, k)
        opt["classifier"] = Adam(*config.adam)
        hist["classifier"] = []
        clf_shuffle = _stream(seed, "clf_shuffle")

    d_shuffle = _stream(seed, "disc_shuffle")
    zrng = _stream(seed, "z")
    n = len(in_data)
    start = time.perf_counter()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        d_batches = _batches(d_shuffle, n, m)
        c_batches = _batches(clf_shuffle, n, m) if with_clf else [None] * len(d_batches)
        rows: dict[str, list] = {key: [] for key in hist}
        for d_idx, c_idx in zip(d_batches, c_batches):
            # discriminator: ascend log D(x) + log(1 - D(G(z)))
            mb = len(d_idx)
            fake = generate(G, prior.sample(mb, zrng))
            bind = {**D.named(), "x_real": in_data.inputs[d_idx], "x_fake": fake}
            loss, grads = d_obj.value_and_grad(bind, D.names())
            _check_finite(loss, "discriminator", epoch)
            D = _apply(D, opt["discriminator"].step(D.named(), grads, lr, sign=-1.0),
                       "discriminator", epoch)
            rows["discriminator"].append(loss)

            # generator: descend GAN term (+ beta KL through the classifier)
            bind = {**G.named(), **D.named(), "z": prior.sample(mb, zrng)}
            if with_clf:
                bind.update(C.named())
            if config.pt_weight is not None:
                bind.update(pt_bindings(mb))
            loss, grads = g_obj.value_and_grad(bind, G.names())
            _check_finite(loss, "generator", epoch)
            G = _apply(G, opt["generator"].step(G.named(), grads, lr), "generator", epoch)
            rows["generator"].append(loss)

            if with_clf:
                # classifier: cross entropy on in-batch + beta KL on fresh G(z)
                fake = generate(G, prior.sample(len(c_idx), zrng))
                bind = {**C.named(), "x_in": in_data.inputs[c_idx],
                        "onehot_in": labels_1h[c_idx], "x_out": fake}
                loss, grads = c_obj.value_and_grad(bind, C.names())
                _check_finite(loss, "classifier", epoch)
                if update_classifier:
                    C = _apply(C, opt["classifier"].step(C.named(), grads, lr), "classifier", epoch)
                rows["classifier"].append(loss)
        for key in hist:
            hist[key].append(_epoch_mean(rows[key]))
    params = {"generator": G, "discriminator": D}
    if with_clf:
        params["classifier"] = C
    return TrainReport(config, hist, params, time.perf_counter() - start)


def train_joint(
    config: TrainConfig,
    in_data: Dataset,
    classifier_spec: MlpSpec | None = None,
    generator_spec: MlpSpec | None = None,
    discriminator_spec: MlpSpec | None = None,
    prior: LatentPrior | None = None,
    init_classifier: ParamSet | None = None,
    update_classifier: bool = True,
    hidden: int = 500,
) -> TrainReport:
    """Alternating updates of discriminator, generator and classifier.

    Per iteration, in order: the discriminator ascends the GAN value on a
    fresh latent batch and an in-distribution batch; the generator descends
    its GAN term plus ``beta`` KL-to-uniform of the classifier on a fresh
    latent batch; the classifier descends cross entropy plus ``beta``
    KL-to-uniform on a third latent batch.  An epoch is ``ceil(N / M)``
    iterations.  ``update_classifier=False`` keeps a (pre-trained)
    classifier frozen, which trains the boundary GAN alone.
    """
    if config.loss_kind != "joint":
        raise ValueError("train_joint needs loss_kind='joint'")
    prior = prior or LatentPrior(100)
    k = _n_classes(in_data)
    if classifier_spec is None:
        classifier_spec = init_classifier.spec if init_classifier else toy_classifier_spec(
            k, hidden, in_data.dims)
    if classifier_spec.output_dim != k or classifier_spec.input_dim != in_data.dims:
        raise ValueError("classifier spec does not match the labeled data")
    generator_spec = generator_spec or toy_generator_spec(prior.dim, hidden, in_data.dims)
    discriminator_spec = discriminator_spec or toy_discriminator_spec(in_data.dims, hidden)
    return _alternating(config, in_data, classifier_spec, generator_spec, discriminator_spec,
                        prior, init_classifier, None, None, update_classifier)


def train_gan(
    config: TrainConfig,
    in_data: Dataset,
    generator_spec: MlpSpec | None = None,
    discriminator_spec: MlpSpec | None = None,
    prior: LatentPrior | None = None,
    hidden: int = 500,
) -> TrainReport:
    """The original GAN: discriminator and generator phases only."""
    prior = prior or LatentPrior(100)
    generator_spec = generator_spec or toy_generator_spec(prior.dim, hidden, in_data.dims)
    discriminator_spec = discriminator_spec or toy_discriminator_spec(in_data.dims, hidden)
    return _alternating(config, in_data, None, generator_spec, discriminator_spec, prior,
                        None, None, None, False)


@dataclass
class SweepResult:
    best_beta: float
    table: list[tuple[float, float]]
    reports: dict[float, TrainReport] = field(default_factory=dict, repr=False)

    def to_json(self) -> str:
        rows = [{"beta": b, "detection_error": e} for b, e in self.table]
        return json.dumps({"best_beta": self.best_beta, "table": rows}, indent=2) + "\n"


def beta_sweep(
    grid,
    config: TrainConfig,
    train_in: Dataset,
    train_out: Dataset,
    val_in: Dataset,
    val_out: Dataset,
    score_fn=None,
    spec: MlpSpec | None = None,
    hidden: int = 500,
) -> SweepResult:
    """Train one confidence-loss model per beta and keep the lowest validation detection error.

    `score_fn(params, x)` defaults to the max-softmax score.  Ties go to the
    smaller beta.  Set ``OODFORGE_THREADS`` to run several betas at once.
    """
    from .detect import baseline_score
    from .metrics import detection_accuracy

    grid = [float(b) for b in grid]
    if not grid:
        raise ValueError("beta grid is empty")
    if len(val_in) == 0 or len(val_out) == 0:
        raise ValueError("validation needs both in- and out-of-distribution samples")
    score_fn = score_fn or baseline_score

    def run(beta):
        cfg = replace(config, beta=beta, loss_kind="confidence")
        try:
            rep = train_classifier(cfg, train_in, train_out, spec=spec, hidden=hidden)
        except Exception as exc:
            raise type(exc)(f"beta={beta}: {exc}") from exc
        theta = rep.params["classifier"]
        err = 1.0 - detection_accuracy(score_fn(theta, val_in.inputs), score_fn(theta, val_out.inputs))
        return rep, err

    workers = max(1, int(os.environ.get("OODFORGE_THREADS", "1") or 1))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, grid))
    else:
        results = [run(b) for b in grid]
    table = [(b, err) for b, (_, err) in zip(grid, results)]
    best = min(table, key=lambda r: (r[1], r[0]))[0]
    return SweepResult(best, table, {b: rep for b, (rep, _) in zip(grid, results)})

"""Fully-connected classifier, generator and discriminator networks.

Parameters live in :class:`ParamSet` objects as plain float64 arrays.  Every
network is evaluated by stamping its layers onto a :class:`~oodforge.autograd.Tape`
with :func:`mlp_on_tape`, so the same construction serves inference, training
objectives and input gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Node, ShapeError, Tape

__all__ = [
    "MlpSpec",
    "ParamSet",
    "LatentPrior",
    "ROLES",
    "PREFIX",
    "D_CLAMP",
    "init_params",
    "mlp_on_tape",
    "classifier_logits",
    "classifier_log_probs",
    "generator_sample",
    "generate",
    "discriminator_prob",
    "input_gradient",
    "saliency_map",
    "save_checkpoint",
    "load_checkpoint",
    "toy_classifier_spec",
    "toy_generator_spec",
    "toy_discriminator_spec",
]

ROLES = ("classifier", "generator", "discriminator")
PREFIX = {"classifier": "C.", "generator": "G.", "discriminator": "D."}
HEADS = ("logits", "sigmoid_scalar", "raw")
ACTIVATIONS = ("relu", "leaky_relu")
D_CLAMP = 1e-12


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    hidden_activation: str = "relu"
    output_head: str = "logits"
    slope: float = 0.2

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        if self.output_head == "sigmoid_scalar" and widths[-1] != 1:
            raise ValueError("sigmoid_scalar head needs final width 1")

    @property
    def input_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def output_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


def toy_classifier_spec(n_classes: int = 2, hidden: int = 500, input_dim: int = 2) -> MlpSpec:
    return MlpSpec((input_dim, hidden, hidden, n_classes))


def toy_generator_spec(prior_dim: int = 100, hidden: int = 500, output_dim: int = 2) -> MlpSpec:
    return MlpSpec((prior_dim, hidden, hidden, output_dim), output_head="raw")


def toy_discriminator_spec(
    input_dim: int = 2, hidden: int = 500, activation: str = "relu"
) -> MlpSpec:
    return MlpSpec((input_dim, hidden, hidden, 1), hidden_activation=activation,
                   output_head="sigmoid_scalar")


@dataclass
class ParamSet:
    spec: MlpSpec
    role: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        widths = self.spec.layer_widths
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise ShapeError("parameter count does not match the layer widths")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise ShapeError(
                    f"layer {i}: got W{w.shape}, b{b.shape}, "
                    f"expected W{(widths[i], widths[i + 1])}, b{(widths[i + 1],)}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} holds non-finite parameters")

    @property
    def prefix(self) -> str:
        return PREFIX[self.role]

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.prefix}W{i}"] = w
            out[f"{self.prefix}b{i}"] = b
        return out

    def names(self) -> list[str]:
        return list(self.named())

    def with_named(self, values: dict[str, np.ndarray]) -> "ParamSet":
        n = self.spec.n_layers
        return ParamSet(
            self.spec,
            self.role,
            [values[f"{self.prefix}W{i}"] for i in range(n)],
            [values[f"{self.prefix}b{i}"] for i in range(n)],
        )

    def copy(self) -> "ParamSet":
        return ParamSet(self.spec, self.role, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])

    def equals(self, other: "ParamSet") -> bool:
        return (
            self.spec == other.spec
            and self.role == other.role
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


@dataclass(frozen=True)
class LatentPrior:
    dim: int = 100
    kind: str = "standard_normal"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("latent dimension must be at least 1")
        if self.kind != "standard_normal":
            raise ValueError("only the standard normal prior is supported")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.dim))


def init_params(spec: MlpSpec, seed: int, role: str = "classifier") -> ParamSet:
    """Glorot-uniform weights, zero biases; a pure function of (spec, seed, role)."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ParamSet(spec, role, weights, biases)


def mlp_on_tape(tape: Tape, spec: MlpSpec, prefix: str, x: Node) -> Node:
    """Append the network to `tape`; parameter leaves are ``{prefix}W{i}``/``{prefix}b{i}``.

    Returns raw logits for a ``logits`` head, the sigmoid probability for
    ``sigmoid_scalar`` and the final affine output for ``raw``.
    """
    h = x
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        h = tape.add(tape.matmul(h, tape.leaf(f"{prefix}W{i}")), tape.leaf(f"{prefix}b{i}"))
        if i < last:
            if spec.hidden_activation == "relu":
                h = tape.relu(h)
            else:
                h = tape.leaky_relu(h, spec.slope)
    if spec.output_head == "sigmoid_scalar":
        h = tape.sigmoid(h)
    return h


def _check_role(params: ParamSet, role: str) -> None:
    if params.role != role:
        raise ValueError(f"expected {role} parameters, got {params.role}")


def _check_batch(params: ParamSet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.input_dim:
        raise ShapeError(
            f"batch of shape {x.shape} does not match input width {params.spec.input_dim}"
        )
    return x


def _run(params: ParamSet, x: np.ndarray) -> np.ndarray:
    tape = Tape()
    out = mlp_on_tape(tape, params.spec, params.prefix, tape.leaf("x"))
    tape.forward({**params.named(), "x": x})
    return tape.value(out)


def classifier_logits(params: ParamSet, batch) -> np.ndarray:
    _check_role(params, "classifier")
    return _run(params, _check_batch(params, batch))


def classifier_log_probs(params: ParamSet, batch, temperature: float = 1.0) -> np.ndarray:
    logits = classifier_logits(params, batch)
    tape = Tape()
    f = tape.leaf("f")
    out = tape.log_softmax(f if temperature == 1.0 else tape.scale(f, 1.0 / temperature))
    tape.forward({"f": logits})
    return tape.value(out)


def generator_sample(
    params: ParamSet, prior: LatentPrior, n: int, seed: int | np.random.Generator
) -> np.ndarray:
    _check_role(params, "generator")
    if prior.dim != params.spec.input_dim:
        raise ShapeError(f"prior dim {prior.dim} != generator input width {params.spec.input_dim}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = prior.sample(int(n), rng)
    if n == 0:
        return np.zeros((0, params.spec.output_dim))
    return _run(params, z)


def generate(params: ParamSet, z: np.ndarray) -> np.ndarray:
    """Push explicit latent codes through a generator."""
    _check_role(params, "generator")
    return _run(params, _check_batch(params, z))


def discriminator_prob(params: ParamSet, batch) -> np.ndarray:
    _check_role(params, "discriminator")
    return _run(params, _check_batch(params, batch))


def _log_prob_of_label(tape: Tape, logits: Node, onehot: Node, temperature: float) -> Node:
    scaled = logits if temperature == 1.0 else tape.scale(logits, 1.0 / temperature)
    return tape.sum(tape.mul(tape.log_softmax(scaled), onehot))


def input_gradient(
    params: ParamSet,
    x,
    objective: str = "log_prob_of_label",
    labels=None,
    temperature: float = 1.0,
    guided: bool = False,
) -> np.ndarray:
    """Exact gradient of a per-sample objective with respect to the inputs.

    ``log_prob_of_label`` differentiates ``log P(y = label | x; T)``, with
    labels defaulting to the argmax prediction (ties to the lowest index).
    ``kl_uniform`` differentiates ``KL(U || P(.|x))``.  Rows are independent,
    so row ``i`` of the result is the gradient of sample ``i``'s objective.
    """
    _check_role(params, "classifier")
    x = _check_batch(params, x)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    tape = Tape()
    xs = tape.leaf("x")
    logits = mlp_on_tape(tape, params.spec, params.prefix, xs)
    bindings = {**params.named(), "x": x}
    k = params.spec.output_dim
    if objective == "log_prob_of_label":
        if labels is None:
            labels = np.argmax(classifier_logits(params, x), axis=1)
        labels = np.asarray(labels, dtype=int)
        root = _log_prob_of_label(tape, logits, tape.leaf("onehot"), temperature)
        bindings["onehot"] = np.eye(k)[labels]
    elif objective == "kl_uniform":
        logp = tape.log_softmax(logits)
        root = tape.shift(tape.scale(tape.sum(logp), -1.0 / k), -np.log(k) * x.shape[0])
    else:
        raise ValueError(f"unknown objective {objective!r}")
    tape.forward(bindings)
    return tape.backward(root, ["x"], guided=guided)["x"]


def saliency_map(params: ParamSet, x, guided: bool = False) -> np.ndarray:
    """Gradient of the top-1 class log-probability with respect to the input."""
    return input_gradient(params, x, "log_prob_of_label", guided=guided)


# -- checkpoint container ---------------------------------------------------

_MAGIC = b"OODF1"
_ROLE_CODE = {r: i for i, r in enumerate(ROLES)}
_ACT_CODE = {a: i for i, a in enumerate(ACTIVATIONS)}
_HEAD_FOR_ROLE = {"classifier": "logits", "generator": "raw", "discriminator": "sigmoid_scalar"}


def checkpoint_bytes(params: ParamSet) -> bytes:
    spec = params.spec
    if spec.output_head != _HEAD_FOR_ROLE[params.role]:
        raise ValueError(f"a {params.role} checkpoint must use the {_HEAD_FOR_ROLE[params.role]} head")
    parts = [
        _MAGIC,
        struct.pack("<I", len(spec.layer_widths)),
        struct.pack(f"<{len(spec.layer_widths)}I", *spec.layer_widths),
        struct.pack("<Bd", _ACT_CODE[spec.hidden_activation], spec.slope),
        struct.pack("<B", _ROLE_CODE[params.role]),
    ]
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ParamSet, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> ParamSet:
    blob = Path(path).read_bytes()
    if blob[:5] != _MAGIC:
        raise ValueError(f"{path}: not an OODF1 checkpoint")
    pos = 5
    try:
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        widths = struct.unpack_from(f"<{n}I", blob, pos)
        pos += 4 * n
        act, slope = struct.unpack_from("<Bd", blob, pos)
        pos += 9
        (role_code,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        role = ROLES[role_code]
        spec = MlpSpec(widths, ACTIVATIONS[act], _HEAD_FOR_ROLE[role], slope)
    except (struct.error, IndexError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint header ({exc})") from None
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        nw, nb = fan_in * fan_out * 8, fan_out * 8
        if pos + nw + nb > len(blob):
            raise ValueError(f"{path}: checkpoint truncated")
        weights.append(np.frombuffer(blob, "<f8", fan_in * fan_out, pos).reshape(fan_in, fan_out).astype(np.float64))
        pos += nw
        biases.append(np.frombuffer(blob, "<f8", fan_out, pos).astype(np.float64))
        pos += nb
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes after parameters")
    return ParamSet(spec, role, weights, biases)

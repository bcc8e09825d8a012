"""Dense reverse-mode autodiff, a ReLU MLP with inverted dropout, and SGD.

Arrays are plain float64 numpy arrays. A :class:`Tape` records every
operation applied to its :class:`Node` objects in creation order, so the
backward pass is a single reversed sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from mixcal.errors import DimensionError, NumericError, UsageError, ValidationError

TRAIN = "train"
EVAL = "eval"


class Node:
    """One recorded value on a tape."""

    __slots__ = ("tape", "index", "value", "parents", "vjp", "name")

    def __init__(self, tape, index, value, parents=(), vjp=None, name=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(index={self.index}, shape={self.value.shape}, name={self.name!r})"


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: Optional[str] = None) -> Node:
        """Register an input or parameter. Named leaves receive gradients."""
        return self.record(np.asarray(value, dtype=np.float64), (), None, name=name)

    def record(self, value, parents: Sequence[Node], vjp: Optional[Callable], name=None) -> Node:
        for p in parents:
            if p.tape is not self:
                raise UsageError("cannot combine nodes from different tapes")
        node = Node(self, len(self.nodes), value, tuple(parents), vjp, name)
        self.nodes.append(node)
        return node


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every named leaf."""
    if loss.tape is not tape or loss.index >= len(tape.nodes) or tape.nodes[loss.index] is not loss:
        raise UsageError("loss node is not on this tape")
    if loss.value.size != 1:
        raise UsageError(f"loss must be a scalar, got shape {loss.value.shape}")

    grads: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[loss.index] = np.ones_like(loss.value)
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads[node.index]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            prev = grads[parent.index]
            grads[parent.index] = pg if prev is None else prev + pg

    out = {}
    for node in tape.nodes:
        if node.name is not None:
            g = grads[node.index]
            out[node.name] = np.zeros_like(node.value) if g is None else g
    return out


# ---------------------------------------------------------------------------
# differentiable operations


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"cannot multiply {a.value.shape} by {b.value.shape}")
    av, bv = a.value, b.value
    return a.tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add_bias(a: Node, b: Node) -> Node:
    if b.value.shape != (a.value.shape[-1],):
        raise DimensionError(f"bias shape {b.value.shape} does not match {a.value.shape}")
    return a.tape.record(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0)))


def add(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise DimensionError(f"cannot add {a.value.shape} and {b.value.shape}")
    return a.tape.record(a.value + b.value, (a, b), lambda g: (g, g))


def mul(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise DimensionError(f"cannot multiply {a.value.shape} and {b.value.shape}")
    av, bv = a.value, b.value
    return a.tape.record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Node, c: float) -> Node:
    return a.tape.record(c * a.value, (a,), lambda g: (c * g,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.tape.record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def mask_mul(a: Node, mask: np.ndarray) -> Node:
    """Multiply by a constant array (dropout masks)."""
    return a.tape.record(a.value * mask, (a,), lambda g: (g * mask,))


def convex_weights(lam: float) -> tuple[float, float]:
    """Return ``(w, 1 - w)`` with ``w ~= lam`` and the pair summing to exactly 1.

    The larger weight is always derived from the smaller one, which makes
    ``convex_weights(1 - lam)`` the exact mirror of ``convex_weights(lam)``.
    """
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"mixing weight must lie in [0, 1], got {lam}")
    rest = 1.0 - lam
    if lam < 0.5:
        lam = 1.0 - rest
    return lam, rest


def mix_rows(a: Node, perm: np.ndarray, lam: float) -> Node:
    """Row-wise convex mix ``lam * a[i] + (1 - lam) * a[perm[i]]``."""
    perm = np.asarray(perm)
    w, rest = convex_weights(lam)
    value = w * a.value + rest * a.value[perm]

    def vjp(g):
        out = w * g
        # perm is a bijection, so fancy-index accumulation has no collisions
        out[perm] += rest * g
        return (out,)

    return a.tape.record(value, (a,), vjp)


def soft_cross_entropy(logits: Node, soft_labels) -> Node:
    """Mean cross-entropy (nats) between softmax(logits) and soft target rows."""
    z = logits.value
    y = np.asarray(soft_labels, dtype=np.float64)
    if y.shape != z.shape or z.ndim != 2:
        raise DimensionError(f"labels {y.shape} do not match logits {z.shape}")
    check_distribution_rows(y)
    logp = log_softmax(z)
    n = z.shape[0]
    value = np.asarray(-np.sum(y * logp) / n)

    def vjp(g):
        return (g * (np.exp(logp) - y) / n,)

    return logits.tape.record(value, (logits,), vjp)


def mean_entropy(logits: Node) -> Node:
    """Mean over rows of the entropy (nats) of softmax(logits)."""
    logp = log_softmax(logits.value)
    p = np.exp(logp)
    h = -np.sum(p * logp, axis=1)
    n = logits.value.shape[0]

    def vjp(g):
        return (g * (-p * (logp + h[:, None])) / n,)

    return logits.tape.record(np.asarray(h.mean()), (logits,), vjp)


# ---------------------------------------------------------------------------
# plain array helpers


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax received non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def check_distribution_rows(y: np.ndarray, tol: float = 1e-9) -> None:
    if not np.all(np.isfinite(y)):
        raise ValidationError("label rows contain non-finite values")
    if np.any(y < 0):
        raise ValidationError("label rows contain negative mass")
    sums = y.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValidationError(f"label row {bad} sums to {sums.flat[bad]!r}, not 1")


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout rate must lie in [0, 1), got {p}")
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout(x, p: float, mode: str = TRAIN, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Inverted dropout on a plain array; identity in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout rate must lie in [0, 1), got {p}")
    x = np.asarray(x, dtype=np.float64)
    if mode == EVAL or p == 0.0:
        return x
    if rng is None:
        raise UsageError("train-mode dropout needs an rng")
    return x * dropout_mask(x.shape, p, rng)


# ---------------------------------------------------------------------------
# model


@dataclass
class MlpModel:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValidationError("an MLP needs at least an input and an output size")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout rate must lie in [0, 1), got {self.dropout}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise DimensionError("weights/biases do not match layer_sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]):
                raise DimensionError(f"W{i} has shape {w.shape}")
            if b.shape != (self.layer_sizes[i + 1],):
                raise DimensionError(f"b{i} has shape {b.shape}")

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_hidden(self) -> int:
        return len(self.layer_sizes) - 2

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.dropout,
        )


def init_mlp(layer_sizes: Sequence[int], rng: np.random.Generator, dropout: float = 0.0) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if any(s < 1 for s in sizes):
        raise ValidationError(f"layer sizes must be positive, got {sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(sizes, weights, biases, dropout)


def forward(model: MlpModel, x, mode: str = EVAL, rng: Optional[np.random.Generator] = None,
            mix: Optional[tuple] = None) -> tuple[Node, Tape]:
    """Run the MLP and return ``(logits_node, tape)``.

    ``mix`` is an optional ``(layer_k, perm, lam)`` triple; when given, the
    activations entering layer ``layer_k`` (0 = raw input) are row-mixed.
    """
    if mode not in (TRAIN, EVAL):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layer_sizes[0]:
        raise DimensionError(f"input shape {x.shape} does not match input dim {model.layer_sizes[0]}")
    if not np.all(np.isfinite(x)):
        raise NumericError("forward received non-finite input")
    use_dropout = mode == TRAIN and model.dropout > 0.0
    if use_dropout and rng is None:
        raise UsageError("train-mode forward with dropout needs an rng")
    if mix is not None:
        layer_k, perm, lam = mix
        if not 0 <= layer_k <= model.n_hidden:
            raise UsageError(f"mix layer {layer_k} outside 0..{model.n_hidden}")

    tape = Tape()
    h = tape.leaf(x)
    params = [(tape.leaf(w, f"W{i}"), tape.leaf(b, f"b{i}"))
              for i, (w, b) in enumerate(zip(model.weights, model.biases))]
    last = len(params) - 1
    for i, (w, b) in enumerate(params):
        if mix is not None and layer_k == i:
            h = mix_rows(h, perm, lam)
        h = add_bias(matmul(h, w), b)
        if i < last:
            h = relu(h)
            if use_dropout:
                h = mask_mul(h, dropout_mask(h.value.shape, model.dropout, rng))
    if not np.all(np.isfinite(h.value)):
        raise NumericError("forward produced non-finite logits")
    return h, tape


def predict_logits(model: MlpModel, x) -> np.ndarray:
    return forward(model, x, EVAL)[0].value


def predict_proba(model: MlpModel, x) -> np.ndarray:
    return softmax(predict_logits(model, x))


# ---------------------------------------------------------------------------
# optimizer

PAPER_MILESTONES = ((60, 2.0), (120, 2.0), (160, 2.0))


@dataclass
class SgdState:
    learning_rate_base: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    schedule: tuple = PAPER_MILESTONES
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate_base <= 0:
            raise ValidationError("learning rate must be positive")
        for epoch, divisor in self.schedule:
            if epoch < 0 or divisor <= 0:
                raise ValidationError(f"bad schedule milestone ({epoch}, {divisor})")


def lr_at_epoch(state: SgdState, epoch: int) -> float:
    if epoch < 0:
        raise ValidationError("epoch must be non-negative")
    lr = state.learning_rate_base
    for milestone, divisor in state.schedule:
        if milestone <= epoch:
            lr /= divisor
    return lr


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: SgdState,
             epoch: int) -> dict[str, np.ndarray]:
    """Update ``params`` and the state's velocity buffers in place."""
    lr = lr_at_epoch(state, epoch)
    m = state.momentum
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        v *= m
        v += g
        if state.nesterov:
            p -= lr * (g + m * v)
        else:
            p -= lr * v
    return params

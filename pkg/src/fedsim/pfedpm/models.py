"""Body, decision head and relation head networks, and the SGD-with-momentum optimizer.

All three networks are stacks of dense layers. Bodies may differ in hidden
widths from one client to the next; the feature width ``d`` they emit is the
only thing the prototype protocol needs them to agree on.
"""
import logging
from dataclasses import dataclass
from dataclasses import field
from typing import Optional
from typing import Sequence

import numpy as np

from .errors import ContractError
from .errors import DimensionError
from .errors import NumericError
from .streams import Stream
from .streams import generator
from .tensor import Tensor
from .tensor import add_bias
from .tensor import concat_rows
from .tensor import matmul
from .tensor import no_grad
from .tensor import relu
from .tensor import sigmoid

logger = logging.getLogger(__name__)

DEFAULT_FEATURE_DIM = 50
"""Prototype width, after the 50-scalar feature example of the method's description."""

DEFAULT_RELATION_HIDDEN = 32


@dataclass(frozen=True)
class BodySpec:
    """Architecture of a feature extractor.

    Attributes
    ----------
    input_dim : int
        Width of a raw sample.
    hidden_dims : tuple of int
        Widths of the ReLU hidden layers; may differ per client.
    feature_dim : int
        Width of the emitted feature, shared by every client of an experiment.

    """

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    feature_dim: int = DEFAULT_FEATURE_DIM

    def __post_init__(self):
        """Checks every width is positive."""
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        for width in (self.input_dim, *self.hidden_dims, self.feature_dim):
            if width < 1:
                raise ContractError(f"layer widths must be positive, got {self}")


@dataclass
class Dense:
    """One fully connected layer."""

    weight: Tensor
    bias: Tensor

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]


def _glorot_stack(widths: Sequence[int], rng: np.random.Generator) -> list[Dense]:
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(Dense(Tensor.parameter(weight), Tensor.parameter(np.zeros(fan_out))))
    return layers


class _Stack:
    """Dense layers with ReLU between them and a linear last layer."""

    def __init__(self, layers: list[Dense]):
        self.layers = layers

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_features

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_features

    def parameters(self) -> list[Tensor]:
        """Trainable tensors in layer order, weight before bias."""
        return [t for layer in self.layers for t in (layer.weight, layer.bias)]

    def num_parameters(self) -> int:
        """Number of trainable scalars."""
        return sum(t.size for t in self.parameters())

    def parameter_shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.parameters()]

    def _run(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(
                f"{self.__class__.__name__} expects rows of width {self.input_dim}, got shape {x.shape}"
            )
        h = x
        for i, layer in enumerate(self.layers):
            h = add_bias(matmul(h, layer.weight), layer.bias)
            if i < len(self.layers) - 1:
                h = relu(h)
        return h


class Body(_Stack):
    """Feature extractor ``f(phi)``: ReLU MLP whose last layer is linear and ``spec.feature_dim`` wide."""

    def __init__(self, spec: BodySpec, layers: list[Dense]):
        """Wraps already initialized layers."""
        super().__init__(layers)
        self.spec = spec

    def forward(self, x: Tensor) -> Tensor:
        """Maps an m×input_dim batch to m×d features."""
        return self._run(x)


class DecisionHead(_Stack):
    """Classifier ``g(varphi)`` mapping features to class logits, no terminal activation."""

    @property
    def num_classes(self) -> int:
        return self.output_dim

    def forward(self, h: Tensor) -> Tensor:
        """Maps m×d features to m×C logits."""
        return self._run(h)


class RelationHead(_Stack):
    """Relation module ``g(psi)``: scores a concatenated (feature, prototype) row in (0, 1)."""

    def forward(self, pairs: Tensor) -> Tensor:
        """Maps m×2d pairs to m×1 scores."""
        return sigmoid(self._run(pairs))


def init_body(spec: BodySpec, seed: int) -> Body:
    """Glorot-uniform initialization of a body from the ``BODY`` stream; biases are zero.

    Every client with the same spec starts from the same weights, so their
    features, and the prototypes computed from them, share one coordinate system.
    """
    rng = generator(seed, Stream.BODY)
    widths = [spec.input_dim, *spec.hidden_dims, spec.feature_dim]
    return Body(spec, _glorot_stack(widths, rng))


def init_decision_head(feature_dim: int, num_classes: int, seed: int, hidden_dims: Sequence[int] = ()) -> DecisionHead:
    """Glorot-uniform decision head, shared like the body; a single linear layer unless ``hidden_dims`` is given."""
    rng = generator(seed, Stream.DECISION)
    return DecisionHead(_glorot_stack([feature_dim, *hidden_dims, num_classes], rng))


def init_relation_head(
    feature_dim: int, seed: int, client: int = 0, hidden: int = DEFAULT_RELATION_HIDDEN
) -> RelationHead:
    """Glorot-uniform relation head 2d → hidden → 1."""
    rng = generator(seed, Stream.RELATION, client)
    return RelationHead(_glorot_stack([2 * feature_dim, hidden, 1], rng))


@dataclass
class OptimizerState:
    """Heavy-ball SGD state: one velocity buffer per parameter tensor."""

    lr: float
    momentum: float
    velocities: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        """Validates the hyperparameters."""
        if not self.lr > 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")

    @classmethod
    def for_parameters(cls, params: Sequence[Tensor], lr: float, momentum: float) -> "OptimizerState":
        """Zero velocities shaped like ``params``."""
        return cls(lr, momentum, [np.zeros(p.shape) for p in params])


def sgd_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], opt: OptimizerState):
    """One step of ``v <- momentum * v + g; p <- p - lr * v`` applied in place.

    A missing gradient (``None``) counts as zero.
    """
    if not (len(params) == len(grads) == len(opt.velocities)):
        raise ContractError(
            f"sgd_step got {len(params)} parameters, {len(grads)} gradients and {len(opt.velocities)} velocities"
        )
    for p, g, v in zip(params, grads, opt.velocities):
        if v.shape != p.shape or (g is not None and np.shape(g) != p.shape):
            raise ContractError(f"sgd_step shape mismatch for parameter {p.shape}")
        v *= opt.momentum
        if g is not None:
            v += g
        updated = p.data - opt.lr * v
        if not np.isfinite(updated).all():
            raise NumericError(f"sgd_step diverged on a parameter of shape {p.shape}")
        p.data = updated


def relation_pairs(features: np.ndarray, prototypes: np.ndarray) -> Tensor:
    """Duplicates each of the m feature rows C times and concatenates it with the C prototypes.

    Row ``s * C + j`` of the result is ``[h_s, prototype_j]``; the result is m·C × 2d.
    """
    m, num_classes = features.shape[0], prototypes.shape[0]
    return concat_rows(Tensor(np.repeat(features, num_classes, axis=0)), Tensor(np.tile(prototypes, (m, 1))))


def relation_scores(body: Body, relation: RelationHead, x: Tensor, prototypes: np.ndarray) -> np.ndarray:
    """m×C relation scores of a batch against C prototypes, without gradient recording."""
    with no_grad():
        features = body.forward(x).data
        scores = relation.forward(relation_pairs(features, prototypes)).data
    return scores.reshape(x.shape[0], prototypes.shape[0])

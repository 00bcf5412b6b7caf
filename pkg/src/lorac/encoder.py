"""Query/key MLP encoders with a momentum-tracked key side.

The query encoder is trained by backpropagation; the key encoder is never
attached to a tape and only moves through :func:`momentum_update`.  Both
produce unit-norm embeddings (normalization is the last forward step).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import Tape, Tensor, l2_normalize_rows, relu


@dataclass
class EncoderParams:
    """MLP parameters: hidden (weight, bias) layers plus a final projection.

    ReLU is applied after every hidden layer except the last, so the default
    two-layer configuration has exactly one hidden nonlinearity.
    """

    weights: list[np.ndarray] = field(default_factory=list)  # (fan_in, fan_out)
    biases: list[np.ndarray] = field(default_factory=list)   # (1, fan_out)
    projection: np.ndarray = None                             # (last, embed_dim)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0] if self.weights else self.projection.shape[0]

    @property
    def out_dim(self) -> int:
        return self.projection.shape[1]

    def tensors(self) -> list[np.ndarray]:
        """Parameter arrays in canonical (checkpoint) order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        out.append(self.projection)
        return out

    def clone(self) -> "EncoderParams":
        return EncoderParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            projection=self.projection.copy(),
        )


@dataclass
class AttachedParams:
    """Leaf tensors for one encoder's parameters on a given tape."""

    weights: list[Tensor]
    biases: list[Tensor]
    projection: Tensor

    def all(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        out.append(self.projection)
        return out


@dataclass
class EncoderPair:
    """Trained query parameters plus their momentum-tracked key copy."""

    query: EncoderParams
    key: EncoderParams
    momentum: float = 0.999


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(d_in: int, hidden: tuple[int, ...], embed_dim: int,
                rng: np.random.Generator) -> EncoderParams:
    weights, biases = [], []
    prev = d_in
    for h in hidden:
        weights.append(_glorot(rng, prev, h))
        biases.append(np.zeros((1, h)))
        prev = h
    return EncoderParams(weights=weights, biases=biases,
                         projection=_glorot(rng, prev, embed_dim))


def make_encoder_pair(d_in: int, hidden: tuple[int, ...] = (64, 64),
                      embed_dim: int = 32, momentum: float = 0.999,
                      rng: np.random.Generator | None = None) -> EncoderPair:
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"encoder momentum must lie in [0, 1], got {momentum}")
    if rng is None:
        rng = np.random.Generator(np.random.Philox(key=0))
    query = init_params(d_in, tuple(hidden), embed_dim, rng)
    return EncoderPair(query=query, key=query.clone(), momentum=momentum)


def attach_params(params: EncoderParams, tape: Tape) -> AttachedParams:
    """Register every parameter array as a leaf on ``tape``."""
    return AttachedParams(
        weights=[Tensor.param(w, tape) for w in params.weights],
        biases=[Tensor.param(b, tape) for b in params.biases],
        projection=Tensor.param(params.projection, tape),
    )


def mlp_forward(params: EncoderParams | AttachedParams, x) -> Tensor:
    """Forward pass to unit-norm embeddings.

    ``params`` may be raw arrays (detached forward) or tape-attached leaves.
    """
    if isinstance(params, EncoderParams):
        weights = [Tensor(w) for w in params.weights]
        biases = [Tensor(b) for b in params.biases]
        projection = Tensor(params.projection)
    else:
        weights, biases, projection = params.weights, params.biases, params.projection
    h = x if isinstance(x, Tensor) else Tensor(x)
    n = len(weights)
    for i in range(n):
        h = h @ weights[i] + biases[i]
        if i + 1 < n:
            h = relu(h)
    return l2_normalize_rows(h @ projection)


def forward_query(pair: EncoderPair, x, tape: Tape | None = None) -> Tensor:
    """Encode with the query parameters; tape-attached when a tape is given."""
    if tape is None:
        return mlp_forward(pair.query, x)
    return mlp_forward(attach_params(pair.query, tape), x)


def forward_key(pair: EncoderPair, x) -> Tensor:
    """Encode with the key parameters; always detached from any tape."""
    return mlp_forward(pair.key, x)


def momentum_update(pair: EncoderPair) -> None:
    """Move key parameters: theta_k <- m * theta_k + (1 - m) * theta_q."""
    m = pair.momentum
    for k, q in zip(pair.key.tensors(), pair.query.tensors()):
        k[...] = m * k + (1.0 - m) * q

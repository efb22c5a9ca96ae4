"""Small feed-forward embedding backbone on the unit hypersphere.

A model is a stack of tanh hidden layers, a linear projection to the
embedding dimension, and an exact L2 row normalization.  Classifier centers
(one row per class) live on the model and are free parameters; they are
normalized on the fly wherever the loss head consumes them, and gradients
flow through that normalization (no stop-gradient).

Everything is float64.  All public operations either return finite arrays
or raise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateEmbeddingError, NumericError, ShapeError

DEGENERATE_NORM = 1e-12

ACTIVATION_TANH = "tanh"


@dataclass
class EmbeddingModel:
    """Layer parameters plus classifier centers.

    ``layers`` holds (weight, bias) pairs with weight shape (out, in); all
    but the last layer are followed by tanh.  ``centers`` has shape
    (num_classes, embed_dim) and is stored unconstrained.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    centers: np.ndarray
    activation: str = ACTIVATION_TANH

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in a stable order: W1, b1, ..., WL, bL, centers."""
        out: list[np.ndarray] = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        out.append(self.centers)
        return out

    def parameter_names(self) -> list[str]:
        out: list[str] = []
        for i in range(len(self.layers)):
            out.append(f"layer{i}.weight")
            out.append(f"layer{i}.bias")
        out.append("centers")
        return out

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            layers=[(w.copy(), b.copy()) for w, b in self.layers],
            centers=self.centers.copy(),
            activation=self.activation,
        )


def init_model(input_dim: int, hidden_widths: tuple[int, ...], embed_dim: int,
               num_classes: int, rng: np.random.Generator) -> EmbeddingModel:
    """Seeded init: weights uniform in [-a, a] with a = sqrt(6/(fan_in+fan_out)),
    biases zero, centers random unit rows."""
    dims = (input_dim, *hidden_widths, embed_dim)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    centers, _ = unit_rows(rng.standard_normal((num_classes, embed_dim)))
    return EmbeddingModel(layers=layers, centers=centers)


def unit_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalize rows; returns (unit matrix, norms).

    Raises DegenerateEmbeddingError when any row norm falls below 1e-12,
    rather than clamping: silent NaN sources are not allowed.
    """
    norms = np.linalg.norm(m, axis=-1)
    if np.any(norms < DEGENERATE_NORM):
        bad = int(np.argmin(norms))
        raise DegenerateEmbeddingError(
            f"row {bad} has norm {norms.flat[bad]:.3e} < {DEGENERATE_NORM}"
        )
    return m / norms[..., None], norms


def unit_rows_backward(grad_unit: np.ndarray, unit: np.ndarray,
                       norms: np.ndarray) -> np.ndarray:
    """Exact Jacobian of row normalization: (g - (g.u) u) / ||raw||."""
    dots = np.sum(grad_unit * unit, axis=-1, keepdims=True)
    return (grad_unit - dots * unit) / norms[..., None]


@dataclass
class ForwardCache:
    """Activations needed to run the backward pass."""

    inputs: np.ndarray
    hidden: list[np.ndarray] = field(default_factory=list)  # post-tanh activations
    raw_embed: np.ndarray | None = None
    unit_embed: np.ndarray | None = None
    norms: np.ndarray | None = None


def forward_batch(model: EmbeddingModel, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the backbone on a (B, input_dim) batch; returns unit embeddings + cache."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(
            f"expected input of shape (batch, {model.input_dim}), got {x.shape}"
        )
    cache = ForwardCache(inputs=x)
    h = x
    last = len(model.layers) - 1
    for i, (w, b) in enumerate(model.layers):
        z = h @ w.T + b
        if i < last:
            h = np.tanh(z)
            cache.hidden.append(h)
        else:
            cache.raw_embed = z
    unit, norms = unit_rows(cache.raw_embed)
    if not np.all(np.isfinite(unit)):
        raise NumericError("non-finite embedding produced by forward pass")
    cache.unit_embed = unit
    cache.norms = norms
    return unit, cache


def embed_batch(model: EmbeddingModel, x: np.ndarray) -> np.ndarray:
    out, _ = forward_batch(model, x)
    return out


def embed(model: EmbeddingModel, x: np.ndarray) -> np.ndarray:
    """Unit-norm embedding of a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-d input vector, got shape {x.shape}")
    return embed_batch(model, x[None, :])[0]


def backward_batch(model: EmbeddingModel, cache: ForwardCache,
                   grad_embed: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Reverse-mode gradients of the layer parameters.

    ``grad_embed`` is the upstream gradient on the unit embeddings; the
    normalization Jacobian is applied exactly.  Returns (dW, db) per layer.
    """
    grad_embed = np.asarray(grad_embed, dtype=np.float64)
    if grad_embed.shape != cache.unit_embed.shape:
        raise ShapeError(
            f"upstream gradient shape {grad_embed.shape} does not match "
            f"embeddings {cache.unit_embed.shape}"
        )
    if not np.all(np.isfinite(grad_embed)):
        raise NumericError("non-finite upstream gradient")

    g = unit_rows_backward(grad_embed, cache.unit_embed, cache.norms)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        w, _ = model.layers[i]
        below = cache.hidden[i - 1] if i > 0 else cache.inputs
        grads[i] = (g.T @ below, g.sum(axis=0))
        if i > 0:
            g = (g @ w) * (1.0 - cache.hidden[i - 1] ** 2)
    return grads

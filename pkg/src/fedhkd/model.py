"""Feature extractor / classifier split, soft targets and representation clipping."""

from __future__ import annotations

import numpy as np

from .numerics import (
    Layer,
    ShapeError,
    batchnorm,
    dense,
    layer_backward,
    layer_forward,
    relu,
    softmax,
)

DEFAULT_TEMPERATURE = 0.5


class SplitModel:
    """A network ``G(R(x))``: ``extractor`` layers produce the representation
    ``h``, ``classifier`` layers map it to logits.

    With ``strict`` (the default) the extractor must end in batchnorm and
    the classifier must end in a dense layer and contain no batchnorm.
    """

    def __init__(self, extractor: list[Layer], classifier: list[Layer], strict: bool = True):
        self.extractor = list(extractor)
        self.classifier = list(classifier)
        self.strict = strict
        self._validate()

    def _validate(self):
        if not self.extractor or not self.classifier:
            raise ValueError("extractor and classifier must both be non-empty")
        if self.strict and self.extractor[-1].kind != "batchnorm":
            raise ValueError("extractor must end in a batchnorm layer")
        if self.classifier[-1].kind != "dense":
            raise ValueError("classifier must end in a dense layer")
        if any(layer.kind == "batchnorm" for layer in self.classifier):
            raise ValueError("batchnorm is not supported inside the classifier")
        dim = None
        for i, layer in enumerate(self.extractor + self.classifier):
            if dim is not None and layer.in_dim is not None and layer.in_dim != dim:
                raise ShapeError(f"layer {i} ({layer.kind})", dim, layer.in_dim)
            dim = layer.out_dim if layer.out_dim is not None else dim
        if self.repr_dim != self.classifier[0].in_dim:
            raise ShapeError("classifier input", self.repr_dim, self.classifier[0].in_dim)

    @property
    def layers(self) -> list[Layer]:
        return self.extractor + self.classifier

    @property
    def input_dim(self) -> int:
        return self.extractor[0].in_dim

    @property
    def repr_dim(self) -> int:
        for layer in reversed(self.extractor):
            if layer.out_dim is not None:
                return layer.out_dim
        raise ValueError("cannot infer representation dimension")

    @property
    def n_classes(self) -> int:
        return self.classifier[-1].out_dim

    def trainable_params(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order. These are the live arrays, not copies."""
        return [layer.params[k] for layer in self.layers for k in layer.trainable]

    def extractor_params(self) -> list[np.ndarray]:
        return [layer.params[k] for layer in self.extractor for k in layer.trainable]

    def state_arrays(self) -> list[np.ndarray]:
        """Trainable params followed by batchnorm running statistics."""
        bufs = [layer.params[k] for layer in self.layers for k in layer.buffers]
        return self.trainable_params() + bufs

    def load_state(self, arrays) -> None:
        keys = [(layer, k) for layer in self.layers for k in layer.trainable]
        keys += [(layer, k) for layer in self.layers for k in layer.buffers]
        if len(arrays) != len(keys):
            raise ValueError(f"expected {len(keys)} arrays, got {len(arrays)}")
        for (layer, k), arr in zip(keys, arrays):
            if layer.params[k].shape != np.shape(arr):
                raise ShapeError(f"{layer.kind}.{k}", layer.params[k].shape, np.shape(arr))
            layer.params[k] = np.array(arr, dtype=np.float64, copy=True)
        self.touch()

    def touch(self) -> None:
        """Mark parameters as changed so outstanding forward caches go stale."""
        for layer in self.layers:
            layer.version += 1

    def copy(self) -> "SplitModel":
        return SplitModel([l.copy() for l in self.extractor],
                          [l.copy() for l in self.classifier], self.strict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SplitModel) or len(self.layers) != len(other.layers):
            return False
        if len(self.extractor) != len(other.extractor):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.kind != b.kind or a.params.keys() != b.params.keys():
                return False
            if (a.dim, a.momentum, a.eps) != (b.dim, b.momentum, b.eps):
                return False
            if any(a.params[k].tobytes() != b.params[k].tobytes() for k in a.params):
                return False
        return True

    __hash__ = None


def build_model(input_dim: int, n_classes: int, repr_dim: int = 8, hidden: int = 32,
                rng: np.random.Generator | None = None) -> SplitModel:
    """dense(input->hidden) + relu + dense(hidden->repr) + batchnorm | dense(repr->n)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    extractor = [dense(input_dim, hidden, rng), relu(hidden), dense(hidden, repr_dim, rng),
                 batchnorm(repr_dim)]
    classifier = [dense(repr_dim, n_classes, rng)]
    return SplitModel(extractor, classifier)


def run_layers(layers, x, mode="train", update_stats=True):
    caches = []
    for i, layer in enumerate(layers):
        x, cache = layer_forward(layer, x, mode, update_stats=update_stats,
                                 name=f"layer {i} ({layer.kind})")
        caches.append(cache)
    return x, caches


def backprop_layers(layers, caches, grad):
    """Returns the input gradient and per-layer param-grad dicts, in layer order."""
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        grad, grads[i] = layer_backward(layers[i], caches[i], grad)
    return grad, grads


def _as_batch(x, dim, where):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(where, ("batch", dim), x.shape)
    return x


def extract(model: SplitModel, x, mode: str = "eval") -> np.ndarray:
    x = _as_batch(x, model.input_dim, "extract input")
    h, _ = run_layers(model.extractor, x, mode, update_stats=(mode == "train"))
    return h


def classify(model: SplitModel, h) -> np.ndarray:
    h = _as_batch(h, model.repr_dim, "classify input")
    z, _ = run_layers(model.classifier, h, "eval")
    return z


def forward(model: SplitModel, x, mode: str = "eval") -> np.ndarray:
    return classify(model, extract(model, x, mode))


def soft_target(z, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Temperature-scaled softmax of logits ``z`` (a row or a batch of rows)."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return softmax(z, temperature)


def clip_representation(h, zeta: float) -> np.ndarray:
    if not zeta > 0:
        raise ValueError(f"zeta must be > 0, got {zeta}")
    return np.clip(np.asarray(h, dtype=np.float64), -zeta, zeta)

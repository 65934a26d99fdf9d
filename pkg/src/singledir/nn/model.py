"""Sequential model container, forward/backward passes, SGD and evaluation."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import rng as rngs
from ..errors import ConfigError, NumericError, StateError
from . import layers as L
from .intervention import InterventionPlan
from .layers import LayerSpec

Gradients = list  # list[dict[str, np.ndarray]], one dict per layer


class Model:
    """An ordered stack of layers with their parameters and batchnorm buffers.

    The model itself has no train/eval flag: the mode is chosen per call to
    :func:`forward`.  Eval-mode calls never mutate the model, so a trained
    model can be shared between threads for read-only evaluation.
    """

    def __init__(self, input_shape: Sequence[int], layers: Sequence[LayerSpec], seed: int | None = 0):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.output_shapes: list[tuple[int, ...]] = []
        shape = self.input_shape
        for i, spec in enumerate(self.layers):
            spec.validate()
            try:
                shape = spec.output_shape(shape)
            except ConfigError as exc:
                raise ConfigError(f"layer {i} ({spec.kind}): {exc}") from None
            self.output_shapes.append(shape)
        self.params: list[dict[str, np.ndarray]] = [{} for _ in self.layers]
        self.buffers: list[dict[str, np.ndarray]] = [s.init_buffers() for s in self.layers]
        if seed is not None:
            self.initialize(seed)

    def initialize(self, seed: int) -> None:
        self.params = [spec.init_params(rngs.stream(seed, f"init/{i}"))
                       for i, spec in enumerate(self.layers)]
        self.buffers = [s.init_buffers() for s in self.layers]

    @property
    def n_classes(self) -> int:
        return self.output_shapes[-1][0]

    def hidden_layers(self) -> list[int]:
        """Indices of the ReLU layers: the post-nonlinearity analysis points."""
        return [i for i, s in enumerate(self.layers) if s.kind == "relu"]

    def conv_hidden_layers(self) -> list[int]:
        return [i for i in self.hidden_layers() if len(self.output_shapes[i]) == 3]

    def width(self, layer: int) -> int:
        return self.output_shapes[layer][0]

    def producer(self, layer: int) -> int | None:
        """Index of the dense/conv layer whose output feeds ``layer``'s units."""
        for j in range(layer, -1, -1):
            if self.layers[j].kind in ("dense", "conv2d"):
                return j
            if self.layers[j].kind == "flatten":
                return None
        return None

    def copy(self) -> Model:
        return copy.deepcopy(self)


@dataclass
class ForwardTrace:
    activations: list[np.ndarray]
    loss: float | None
    train: bool
    intervened: bool
    model_id: int
    caches: list = field(default_factory=list, repr=False)

    @property
    def logits(self) -> np.ndarray:
        return self.activations[-1]


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and per-example log-probabilities."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(labels)), labels].mean()
    return float(loss), logp


def forward(model: Model, batch: np.ndarray, intervention: InterventionPlan | None = None, *,
            labels: np.ndarray | None = None, train: bool = False,
            rng: np.random.Generator | None = None, update_stats: bool = True,
            compiled=None) -> ForwardTrace:
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ConfigError(f"batch shape {x.shape[1:]} does not match model input {model.input_shape}")
    if compiled is None and intervention is not None and not intervention.is_empty:
        compiled = intervention.compile(model)
    acts = [x]
    caches = []
    for i, spec in enumerate(model.layers):
        k = spec.kind
        cache = None
        if k == "dense":
            x, cache = L.dense_forward(x, model.params[i])
        elif k == "conv2d":
            x, cache = L.conv_forward(x, model.params[i], spec.stride)
        elif k == "relu":
            x, cache = L.relu_forward(x)
        elif k == "batchnorm":
            x, cache = L.batchnorm_forward(x, model.params[i], model.buffers[i], spec, train, update_stats)
        elif k == "dropout":
            if train and spec.p > 0 and rng is None:
                raise StateError("train-mode dropout needs a random generator")
            x, cache = L.dropout_forward(x, spec.p, train, rng)
        elif k == "flatten":
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        if compiled is not None:
            action = compiled.get(i)
            if action is not None:
                x = action.apply(x, rng)
        acts.append(x)
        caches.append(cache if train else None)
    loss = softmax_xent(x, np.asarray(labels))[0] if labels is not None else None
    return ForwardTrace(acts, loss, train, compiled is not None, id(model), caches)


def backward(model: Model, trace: ForwardTrace, labels: np.ndarray, *, input_grad: bool = False):
    """Gradients of the mean cross-entropy for every parameter.

    With ``input_grad`` the gradient with respect to the batch is returned as
    well, as ``(grads, d_input)``.
    """
    if trace.model_id != id(model) or len(trace.caches) != len(model.layers):
        raise StateError("trace was not produced by this model")
    if not trace.train or trace.intervened:
        raise StateError("backward needs a train-mode trace without interventions")
    labels = np.asarray(labels)
    logits = trace.logits
    n = logits.shape[0]
    _, logp = softmax_xent(logits, labels)
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    d /= n
    grads: Gradients = [{} for _ in model.layers]
    for i in range(len(model.layers) - 1, -1, -1):
        spec, cache = model.layers[i], trace.caches[i]
        k = spec.kind
        if k == "dense":
            d, grads[i] = L.dense_backward(d, cache, model.params[i])
        elif k == "conv2d":
            d, grads[i] = L.conv_backward(d, cache, model.params[i])
        elif k == "relu":
            d = L.relu_backward(d, cache)
        elif k == "batchnorm":
            d, grads[i] = L.batchnorm_backward(d, cache, model.params[i])
        elif k == "dropout":
            d = L.dropout_backward(d, cache)
        elif k == "flatten":
            d = d.reshape(cache)
    return (grads, d) if input_grad else grads


def sgd_step(model: Model, grads: Gradients, lr: float) -> Model:
    if len(grads) != len(model.layers):
        raise ConfigError("gradient list does not match the model's layers")
    for i, (p, g) in enumerate(zip(model.params, grads)):
        for name, value in p.items():
            gv = g.get(name)
            if gv is None or gv.shape != value.shape:
                raise ConfigError(f"gradient for layer {i} {name!r} missing or misshapen")
            if not np.all(np.isfinite(gv)):
                raise NumericError(f"non-finite gradient in layer {i} ({name})", layer=i)
    for p, g in zip(model.params, grads):
        for name in p:
            p[name] = p[name] - lr * g[name]
    return model


@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    loss: float


def predict_logits(model: Model, examples: np.ndarray, intervention: InterventionPlan | None = None,
                   seed: int | None = None, batch_size: int = 500) -> np.ndarray:
    compiled = None
    if intervention is not None and not intervention.is_empty:
        compiled = intervention.compile(model)
    noise_seed = seed
    if noise_seed is None and intervention is not None and intervention.noise is not None:
        noise_seed = intervention.noise.seed
    gen = rngs.stream(noise_seed or 0, "eval-noise")
    out = []
    for start in range(0, len(examples), batch_size):
        tr = forward(model, examples[start:start + batch_size], compiled=compiled, rng=gen)
        out.append(tr.logits)
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def evaluate(model: Model, dataset, intervention: InterventionPlan | None = None,
             seed: int | None = None, batch_size: int = 500) -> Evaluation:
    """Eval-mode accuracy and mean cross-entropy on ``dataset``.

    Noise interventions draw from a stream keyed by ``seed`` (falling back to
    the plan's own noise seed).  Argmax ties resolve to the lowest class.
    """
    logits = predict_logits(model, dataset.examples, intervention, seed, batch_size)
    labels = np.asarray(dataset.labels)
    loss, _ = softmax_xent(logits, labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return Evaluation(acc, loss)


# --- architectures ---------------------------------------------------------------

def mlp(input_dim: int, hidden: Sequence[int], n_classes: int, *, dropout: float = 0.0,
        batchnorm: bool = False, seed: int = 0) -> Model:
    specs: list[LayerSpec] = []
    width = input_dim
    for h in hidden:
        specs.append(LayerSpec.dense(width, h))
        if batchnorm:
            specs.append(LayerSpec.batchnorm(h))
        specs.append(LayerSpec.relu())
        if dropout:
            specs.append(LayerSpec.dropout(dropout))
        width = h
    specs.append(LayerSpec.dense(width, n_classes))
    return Model((input_dim,), specs, seed=seed)


def convnet(input_shape: Sequence[int], channels: Sequence[int], strides: Sequence[int], n_classes: int,
            *, dense_hidden: Sequence[int] = (), dropout: float = 0.0, batchnorm: bool = True,
            seed: int = 0) -> Model:
    if len(channels) != len(strides):
        raise ConfigError("channels and strides must have the same length")
    specs: list[LayerSpec] = []
    c = input_shape[0]
    for ch, st in zip(channels, strides):
        specs.append(LayerSpec.conv2d(c, ch, st))
        if batchnorm:
            specs.append(LayerSpec.batchnorm(ch))
        specs.append(LayerSpec.relu())
        c = ch
    specs.append(LayerSpec.flatten())
    probe = Model(input_shape, specs, seed=None)
    width = probe.output_shapes[-1][0]
    for h in dense_hidden:
        specs.append(LayerSpec.dense(width, h))
        if batchnorm:
            specs.append(LayerSpec.batchnorm(h))
        specs.append(LayerSpec.relu())
        if dropout:
            specs.append(LayerSpec.dropout(dropout))
        width = h
    specs.append(LayerSpec.dense(width, n_classes))
    return Model(input_shape, specs, seed=seed)

"""
Minimal deterministic network stack.

Tensors are contiguous numpy arrays (float64 by default, float32 selectable)
that must stay finite. Layers implement explicit forward / backward passes;
there is no autodiff graph. A ``Network`` is an ordered feature extractor
``f_theta`` followed by a head ``g_w``; every parameter is addressed by a
stable path such as ``feature_extractor.1.gamma``.
"""

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from daftlab.errors import ConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

FEATURE_EXTRACTOR = "feature_extractor"
HEAD = "head"
PARTS = (FEATURE_EXTRACTOR, HEAD)

TRAIN = "train"
TEST = "test"
BN_MODES = (TRAIN, TEST)

DTYPES = {"float64": np.float64, "float32": np.float32}

DEFAULT_EPSILON = 1e-5
DEFAULT_MOMENTUM = 0.1


def resolve_dtype(precision):
    try:
        return DTYPES[precision]
    except KeyError:
        raise ConfigError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}") from None


def ensure_finite(array, what="tensor"):
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"non-finite values in {what}")
    return array


def as_tensor(data, dtype=np.float64, what="tensor"):
    """Copy ``data`` into a contiguous finite array of ``dtype``."""
    array = np.array(data, dtype=dtype, order="C", copy=True)
    if array.ndim == 0 or 0 in array.shape:
        raise ShapeError(f"{what} must have positive extents, got shape {array.shape}")
    return ensure_finite(array, what)


def _check_batch(batch, width, what):
    if batch.ndim != 2:
        raise ShapeError(f"{what}: expected a 2-D batch, got shape {batch.shape}")
    if batch.shape[1] != width:
        raise ShapeError(f"{what}: expected width {width}, got {batch.shape[1]}")


class DenseLayer:
    kind = "dense"

    def __init__(self, weight, bias):
        weight = np.ascontiguousarray(weight)
        bias = np.ascontiguousarray(bias)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"dense layer: weight {weight.shape} and bias {bias.shape} disagree")
        self.weight = weight
        self.bias = bias

    @classmethod
    def initialize(cls, in_features, out_features, rng, dtype=np.float64, init="he"):
        if init == "zero":
            weight = np.zeros((out_features, in_features), dtype=dtype)
        elif init == "he":
            weight = rng.normal(0.0, np.sqrt(2.0 / in_features), (out_features, in_features)).astype(dtype)
        elif init == "normal":
            weight = rng.normal(0.0, np.sqrt(1.0 / in_features), (out_features, in_features)).astype(dtype)
        else:
            raise ConfigError(f"unknown dense init {init!r}")
        return cls(weight, np.zeros(out_features, dtype=dtype))

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def statistics(self):
        return {}

    def describe(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}

    def forward(self, x):
        _check_batch(x, self.in_features, "dense layer")
        return x @ self.weight.T + self.bias, x

    def backward(self, ctx, grad_out, need_input_grad=True):
        x = ctx
        if grad_out.shape != (x.shape[0], self.out_features):
            raise ShapeError(f"dense backward: gradient shape {grad_out.shape} does not match output")
        grads = {"weight": grad_out.T @ x, "bias": grad_out.sum(axis=0)}
        grad_in = grad_out @ self.weight if need_input_grad else None
        return grad_in, grads


class Activation:
    kind = "activation"
    FUNCTIONS = ("relu", "tanh")

    def __init__(self, function="relu"):
        if function not in self.FUNCTIONS:
            raise ConfigError(f"unknown activation {function!r}")
        self.function = function

    def parameters(self):
        return {}

    def statistics(self):
        return {}

    def describe(self):
        return {"kind": self.kind, "function": self.function}

    def forward(self, x):
        if self.function == "relu":
            mask = x > 0
            return np.where(mask, x, 0.0).astype(x.dtype, copy=False), mask
        out = np.tanh(x)
        return out, out

    def backward(self, ctx, grad_out, need_input_grad=True):
        if grad_out.shape != ctx.shape:
            raise ShapeError(f"activation backward: gradient shape {grad_out.shape} != {ctx.shape}")
        if self.function == "relu":
            return np.where(ctx, grad_out, 0.0).astype(grad_out.dtype, copy=False), {}
        return grad_out * (1.0 - ctx * ctx), {}


@dataclass
class BatchNormContext:
    """What ``BatchNormLayer.backward`` needs from the forward pass."""

    mode: str
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


class BatchNormLayer:
    """Per-channel batch normalization over a ``[m, channels]`` batch.

    Train mode normalizes with the biased batch variance and folds the batch
    statistics into the running estimates; the running variance stores the
    unbiased ``m / (m - 1)`` corrected value. Test mode normalizes with the
    stored ``running_mean`` / ``running_var`` and mutates nothing.
    """

    kind = "batchnorm"

    def __init__(self, channels, gamma=None, beta=None, running_mean=None, running_var=None,
                 epsilon=DEFAULT_EPSILON, momentum=DEFAULT_MOMENTUM, dtype=np.float64):
        if channels < 1:
            raise ShapeError("batchnorm needs at least one channel")
        if not epsilon > 0:
            raise ConfigError(f"batchnorm epsilon must be > 0, got {epsilon}")
        if not 0 < momentum <= 1:
            raise ConfigError(f"batchnorm momentum must be in (0, 1], got {momentum}")
        self.channels = int(channels)
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.mode = TRAIN
        self.gamma = self._vector(gamma, 1.0, dtype, "gamma")
        self.beta = self._vector(beta, 0.0, dtype, "beta")
        self.running_mean = self._vector(running_mean, 0.0, dtype, "running_mean")
        self.running_var = self._vector(running_var, 1.0, dtype, "running_var")
        if np.any(self.running_var < 0):
            raise ConfigError("batchnorm running_var must be non-negative")

    def _vector(self, values, fill, dtype, name):
        if values is None:
            return np.full(self.channels, fill, dtype=dtype)
        values = np.array(values, dtype=dtype, order="C", copy=True).reshape(-1)
        if values.shape != (self.channels,):
            raise ShapeError(f"batchnorm {name} has length {values.shape[0]}, expected {self.channels}")
        return values

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def statistics(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def describe(self):
        return {"kind": self.kind, "channels": self.channels, "epsilon": self.epsilon, "momentum": self.momentum}

    def forward_train(self, batch):
        if self.mode != TRAIN:
            raise ConfigError("forward_train called on a batchnorm layer in test mode")
        _check_batch(batch, self.channels, "batchnorm")
        ensure_finite(batch, "batchnorm input")
        m = batch.shape[0]
        if m < 2:
            raise ShapeError(f"degenerate batch: train-mode batchnorm needs m >= 2, got {m}")
        mu = batch.mean(axis=0)
        centered = batch - mu
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        x_hat = centered * inv_std
        out = self.gamma * x_hat + self.beta

        unbiased = var * (m / (m - 1))
        self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * mu
        self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * unbiased
        return out, BatchNormContext(TRAIN, x_hat, inv_std, self.gamma.copy())

    def forward_test(self, batch):
        out, _ = self._forward_fixed(batch)
        return out

    def _forward_fixed(self, batch):
        _check_batch(batch, self.channels, "batchnorm")
        ensure_finite(batch, "batchnorm input")
        inv_std = 1.0 / np.sqrt(self.running_var + self.epsilon)
        x_hat = (batch - self.running_mean) * inv_std
        out = self.gamma * x_hat + self.beta
        return out, BatchNormContext(TEST, x_hat, inv_std, self.gamma.copy())

    def forward(self, x):
        if self.mode == TRAIN:
            return self.forward_train(x)
        return self._forward_fixed(x)

    def backward(self, ctx, grad_out, need_input_grad=True):
        if grad_out.shape != ctx.x_hat.shape:
            raise ShapeError(f"batchnorm backward: gradient shape {grad_out.shape} != {ctx.x_hat.shape}")
        grads = {"gamma": (grad_out * ctx.x_hat).sum(axis=0), "beta": grad_out.sum(axis=0)}
        if not need_input_grad:
            return None, grads
        grad_x_hat = grad_out * ctx.gamma
        if ctx.mode == TEST:
            # affine transform with fixed statistics
            return grad_x_hat * ctx.inv_std, grads
        m = grad_out.shape[0]
        sum_grad = grad_x_hat.sum(axis=0)
        sum_grad_x_hat = (grad_x_hat * ctx.x_hat).sum(axis=0)
        grad_in = (ctx.inv_std / m) * (m * grad_x_hat - sum_grad - ctx.x_hat * sum_grad_x_hat)
        return grad_in, grads


def bn_forward_train(layer, batch):
    return layer.forward_train(batch)


def bn_forward_test(layer, batch):
    return layer.forward_test(batch)


def bn_backward(saved_context, grad_out, layer=None):
    """Return ``(grad_in, grad_gamma, grad_beta)`` for a saved BN context."""
    gamma = saved_context.gamma
    if layer is None:
        layer = BatchNormLayer(gamma.shape[0], gamma=gamma, dtype=gamma.dtype)
    grad_in, grads = layer.backward(saved_context, grad_out)
    return grad_in, grads["gamma"], grads["beta"]


LAYER_TYPES = {"dense": DenseLayer, "activation": Activation, "batchnorm": BatchNormLayer}


@dataclass
class ArchitectureSpec:
    input_dim: int = 8
    hidden: list = field(default_factory=lambda: [32, 32])
    class_count: int = 4
    activation: str = "relu"
    batchnorm: bool = True
    input_batchnorm: bool = True
    head_hidden: list = field(default_factory=list)
    epsilon: float = DEFAULT_EPSILON
    momentum: float = DEFAULT_MOMENTUM

    def validate(self):
        if self.input_dim < 1 or self.class_count < 2:
            raise ConfigError("architecture needs input_dim >= 1 and class_count >= 2")
        if any(int(width) < 1 for width in list(self.hidden) + list(self.head_hidden)):
            raise ConfigError("architecture layer widths must be positive")
        if self.activation not in Activation.FUNCTIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        return self


@dataclass
class ForwardPass:
    features: np.ndarray
    logits: np.ndarray
    contexts: list


@dataclass
class GradientBundle:
    """One gradient per learnable tensor, keyed by parameter path."""

    gradients: dict = field(default_factory=dict)

    def __getitem__(self, path):
        return self.gradients[path]

    def __contains__(self, path):
        return path in self.gradients

    def __iter__(self):
        return iter(self.gradients)

    def __len__(self):
        return len(self.gradients)

    def items(self):
        return self.gradients.items()

    def check_shapes(self, net):
        params = net.parameters()
        for path, grad in self.gradients.items():
            if path not in params:
                raise ShapeError(f"gradient for unknown parameter {path}")
            if grad.shape != params[path].shape:
                raise ShapeError(f"gradient {path} has shape {grad.shape}, parameter has {params[path].shape}")


@dataclass
class Network:
    feature_extractor: list
    head: list
    frozen: set = field(default_factory=set)
    bn_converted: bool = False
    seed_lineage: list = field(default_factory=list)

    def __post_init__(self):
        self.frozen = set(self.frozen)
        unknown = self.frozen - set(PARTS)
        if unknown:
            raise ConfigError(f"unknown network parts {sorted(unknown)}")
        self._check_dimensions()

    def _check_dimensions(self):
        width = None
        for path, layer in self.named_layers():
            if layer.kind == "dense":
                if width is not None and layer.in_features != width:
                    raise ShapeError(f"{path}: expects width {layer.in_features}, previous layer gives {width}")
                width = layer.out_features
            elif layer.kind == "batchnorm":
                if width is not None and layer.channels != width:
                    raise ShapeError(f"{path}: has {layer.channels} channels, previous layer gives {width}")
                width = layer.channels

    def parts(self):
        return [(FEATURE_EXTRACTOR, self.feature_extractor), (HEAD, self.head)]

    def named_layers(self):
        for part, layers in self.parts():
            for index, layer in enumerate(layers):
                yield f"{part}.{index}", layer

    def bn_layers(self):
        return [(path, layer) for path, layer in self.named_layers() if layer.kind == "batchnorm"]

    def parameters(self):
        return {f"{path}.{name}": value for path, layer in self.named_layers()
                for name, value in layer.parameters().items()}

    def statistics(self):
        return {f"{path}.{name}": value for path, layer in self.named_layers()
                for name, value in layer.statistics().items()}

    def state(self):
        state = self.parameters()
        state.update(self.statistics())
        return state

    def _width(self, layers, default):
        for layer in layers:
            if layer.kind == "dense":
                return layer.in_features
            if layer.kind == "batchnorm":
                return layer.channels
        return default

    @property
    def input_dim(self):
        return self._width(self.feature_extractor + self.head, None)

    @property
    def feature_dim(self):
        width = None
        for layer in self.feature_extractor:
            if layer.kind == "dense":
                width = layer.out_features
            elif layer.kind == "batchnorm":
                width = layer.channels
        return width if width is not None else self.input_dim

    @property
    def class_count(self):
        for layer in reversed(self.head):
            if layer.kind == "dense":
                return layer.out_features
        return self.feature_dim

    @property
    def dtype(self):
        for value in self.parameters().values():
            return value.dtype
        return np.dtype(np.float64)

    def architecture(self):
        return {part: [layer.describe() for layer in layers] for part, layers in self.parts()}

    def copy(self):
        return copy.deepcopy(self)

    def set_bn_mode(self, mode, part=None):
        for path, layer in self.bn_layers():
            if part is None or path.startswith(part + "."):
                layer.mode = mode


def build_network(spec, rng, dtype=np.float64):
    """Fresh network: ``[BN] -> (dense -> BN -> act)*`` extractor, dense head."""
    spec.validate()
    layers = []
    width = spec.input_dim
    if spec.batchnorm and spec.input_batchnorm:
        layers.append(BatchNormLayer(width, epsilon=spec.epsilon, momentum=spec.momentum, dtype=dtype))
    for hidden in spec.hidden:
        layers.append(DenseLayer.initialize(width, int(hidden), rng, dtype))
        if spec.batchnorm:
            layers.append(BatchNormLayer(int(hidden), epsilon=spec.epsilon, momentum=spec.momentum, dtype=dtype))
        layers.append(Activation(spec.activation))
        width = int(hidden)
    head = build_head(width, spec.class_count, spec.head_hidden, rng, dtype, spec.activation)
    return Network(layers, head)


def build_head(feature_dim, class_count, head_hidden, rng, dtype=np.float64, activation="relu", init="normal"):
    head = []
    width = feature_dim
    for hidden in head_hidden:
        head.append(DenseLayer.initialize(width, int(hidden), rng, dtype, init="he"))
        head.append(Activation(activation))
        width = int(hidden)
    head.append(DenseLayer.initialize(width, class_count, rng, dtype, init=init))
    return head


def _layer_forward(layer, x, bn_mode):
    if layer.kind == "batchnorm":
        layer.mode = bn_mode
    return layer.forward(x)


def forward(net, batch, bn_mode=TEST, record=None):
    """Run ``batch`` through the network.

    BN layers of a frozen part always run in test mode. ``record`` defaults to
    ``bn_mode == "train"``; without it no contexts are kept and ``backward``
    cannot be called.
    """
    if bn_mode not in BN_MODES:
        raise ConfigError(f"unknown bn_mode {bn_mode!r}")
    if record is None:
        record = bn_mode == TRAIN
    x = np.ascontiguousarray(batch)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"batch of shape {x.shape} does not fit network input width {net.input_dim}")
    ensure_finite(x, "network input")
    contexts = []
    features = x
    for part, layers in net.parts():
        part_mode = TEST if part in net.frozen else bn_mode
        for index, layer in enumerate(layers):
            x, ctx = _layer_forward(layer, x, part_mode)
            if record:
                contexts.append((f"{part}.{index}", ctx))
        if part == FEATURE_EXTRACTOR:
            features = x
    ensure_finite(x, "logits")
    return ForwardPass(features, x, contexts)


def backward(net, saved_contexts, loss_grad):
    """Backpropagate ``loss_grad`` (d loss / d logits) through the network.

    Frozen parts get no gradient entries; when the feature extractor is frozen
    propagation stops at the head input.
    """
    if isinstance(saved_contexts, ForwardPass):
        saved_contexts = saved_contexts.contexts
    contexts = dict(saved_contexts)
    gradients = {}
    grad = loss_grad
    for part, layers in reversed(net.parts()):
        if part == FEATURE_EXTRACTOR and part in net.frozen:
            break
        trainable = part not in net.frozen
        for index in reversed(range(len(layers))):
            path = f"{part}.{index}"
            if path not in contexts:
                raise ConfigError(f"missing forward context for {path}; run forward with record=True")
            first_layer = part == FEATURE_EXTRACTOR and index == 0
            grad, layer_grads = layers[index].backward(contexts[path], grad, need_input_grad=not first_layer)
            if trainable:
                for name, value in layer_grads.items():
                    gradients[f"{path}.{name}"] = value
    return GradientBundle(gradients)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient ``(softmax - onehot) / m``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    m, k = logits.shape
    if np.any(labels < 0) or np.any(labels >= k):
        raise ConfigError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(m)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / m


def extract_features(net, x):
    return forward(net, x, TEST).features


def predict(net, x):
    return np.argmax(forward(net, x, TEST).logits, axis=1)


def accuracy(net, features, labels):
    return float(np.mean(predict(net, features) == np.asarray(labels)))

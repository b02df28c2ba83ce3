"""Small model zoo: an MLP and a two-conv-layer net, three init schemes."""

from dataclasses import asdict, dataclass, field
import math

import numpy as np

from . import diffcore as dc
from ._seeding import stable_hash, substream
from .errors import ConfigError, ShapeError
from .params import ParamVector, load_checkpoint, save_checkpoint

INIT_SCHEMES = ("kaiming", "normal", "xavier")
NORMAL_STD = 0.02


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``input_shape`` is the per-sample shape, e.g. ``(784,)`` or ``(1, 28, 28)``.
    For ``mlp`` the input is flattened and ``widths`` lists the hidden layer
    sizes (an empty tuple gives multinomial logistic regression). For
    ``convnet`` ``channels`` lists the conv layer widths; each conv is
    followed by the activation and a 2x2 average pool, then a linear head.
    """

    input_shape: tuple
    num_classes: int
    architecture: str = "mlp"
    widths: tuple = (128, 64)
    channels: tuple = (8, 16)
    kernel: int = 3
    activation: str = "relu"
    init: str = "kaiming"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.architecture not in ("mlp", "convnet"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme {self.init!r}; expected one of {INIT_SCHEMES}")
        if any(d <= 0 for d in self.input_shape) or not self.input_shape:
            raise ConfigError(f"invalid input shape {self.input_shape}")
        if any(w <= 0 for w in self.widths):
            raise ConfigError(f"layer widths must be positive, got {self.widths}")
        if self.architecture == "convnet":
            if len(self.input_shape) != 3:
                raise ConfigError("convnet needs input_shape (C, H, W)")
            if any(c <= 0 for c in self.channels) or not self.channels:
                raise ConfigError(f"conv channels must be positive, got {self.channels}")
            if self.kernel % 2 == 0 or self.kernel < 1:
                raise ConfigError("conv kernel must be odd")

    @property
    def input_dim(self):
        return math.prod(self.input_shape)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def hash(self):
        return stable_hash(self.to_dict())


def _layer_shapes(spec):
    """(name, weight shape, fan_in, fan_out) for each weighted layer, in order."""
    layers = []
    if spec.architecture == "mlp":
        dims = [spec.input_dim, *spec.widths, spec.num_classes]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            layers.append((f"fc{i}", (a, b), a, b))
        return layers
    c, h, w = spec.input_shape
    k = spec.kernel
    for i, out_c in enumerate(spec.channels):
        if h % 2 or w % 2:
            raise ConfigError(f"convnet spatial size {h}x{w} not divisible by 2 at conv{i}")
        layers.append((f"conv{i}", (out_c, c, k, k), c * k * k, out_c * k * k))
        c, h, w = out_c, h // 2, w // 2
    flat = c * h * w
    layers.append(("fc", (flat, spec.num_classes), flat, spec.num_classes))
    return layers


def init(spec):
    """Initial parameters; deterministic given ``spec.seed``. Biases start at zero."""
    rng = substream(spec.seed, "init", INIT_SCHEMES.index(spec.init))
    arrays = []
    for name, shape, fan_in, fan_out in _layer_shapes(spec):
        if spec.init == "kaiming":
            std = math.sqrt(2.0 / fan_in)
        elif spec.init == "xavier":
            std = math.sqrt(2.0 / (fan_in + fan_out))
        else:
            std = NORMAL_STD
        arrays.append((f"{name}.weight", rng.normal(0.0, std, size=shape)))
        bias_len = shape[0] if name.startswith("conv") else shape[1]
        arrays.append((f"{name}.bias", np.zeros(bias_len)))
    return ParamVector.from_arrays(arrays, meta={"spec_hash": spec.hash()})


class Model:
    """Callable forward pass ``model(param_tensors, x) -> logits`` for one spec."""

    def __init__(self, spec):
        self.spec = spec
        self._layers = _layer_shapes(spec)

    def _act(self, t):
        return t.relu() if self.spec.activation == "relu" else t.tanh()

    def _check_input(self, x):
        got = tuple(x.shape[1:])
        if got != self.spec.input_shape and not (
                self.spec.architecture == "mlp" and math.prod(got) == self.spec.input_dim
                and len(got) > 0):
            raise ShapeError(("N",) + self.spec.input_shape, tuple(x.shape), "model input")

    def layer_outputs(self, tensors, x):
        """Yields ``(layer name, activation)`` pairs, ending with the logits."""
        x = x if isinstance(x, dc.Tensor) else dc.Tensor(x)
        self._check_input(x)
        n = x.shape[0]
        it = iter(tensors)
        if self.spec.architecture == "mlp":
            h = x.reshape((n, self.spec.input_dim))
            last = len(self._layers) - 1
            for i, (name, *_rest) in enumerate(self._layers):
                w, b = next(it), next(it)
                h = dc.affine(h, w, b)
                if i < last:
                    h = self._act(h)
                yield name, h
            return
        h = x
        pad = self.spec.kernel // 2
        for name, *_rest in self._layers[:-1]:
            w, b = next(it), next(it)
            h = dc.avg_pool2d(self._act(dc.conv2d(h, w, b, padding=pad)))
            yield name, h
        h = h.reshape((n, int(np.prod(h.shape[1:]))))
        w, b = next(it), next(it)
        yield "fc", dc.affine(h, w, b)

    def __call__(self, tensors, x):
        out = None
        for _, out in self.layer_outputs(tensors, x):
            pass
        return out

    def features(self, tensors, x):
        """Penultimate activations (flattened)."""
        outs = list(self.layer_outputs(tensors, x))
        if len(outs) < 2:
            h = x if isinstance(x, dc.Tensor) else dc.Tensor(x)
            return h.reshape((h.shape[0], int(np.prod(h.shape[1:]))))
        h = outs[-2][1]
        return h.reshape((h.shape[0], int(np.prod(h.shape[1:]))))


def _as_batch(spec, inputs):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == len(spec.input_shape):
        x = x[None]
    return x


def logits(spec, params, inputs):
    x = _as_batch(spec, inputs)
    with dc.no_grad():
        return Model(spec)(dc.param_tensors(params, False), x).data


def predict(spec, params, inputs):
    """Class-probability rows, one per input."""
    z = logits(spec, params, inputs)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def accuracy(spec, params, inputs, labels):
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits(spec, params, inputs), axis=1) == np.asarray(labels)))


def loss(spec, params, inputs, labels):
    """Mean softmax cross-entropy over the batch."""
    x = _as_batch(spec, inputs)
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise ConfigError(f"labels must lie in [0, {spec.num_classes})")
    with dc.no_grad():
        out = Model(spec)(dc.param_tensors(params, False), x)
        return dc.softmax_cross_entropy(out, labels).item()


def features(spec, params, inputs):
    x = _as_batch(spec, inputs)
    with dc.no_grad():
        return Model(spec).features(dc.param_tensors(params, False), x).data


def grad_loss(spec, params, inputs, labels):
    return dc.grad_params(Model(spec), params, _as_batch(spec, inputs), labels)


def save_params(path, spec, params, extra=None):
    save_checkpoint(path, params, spec.hash(), extra)


def load_params(path, spec=None):
    params, header = load_checkpoint(path, None if spec is None else spec.hash())
    return params

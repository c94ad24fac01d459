"""Declarative network specs, the two cover architectures, and training glue.

A :class:`NetworkSpec` is an ordered tuple of layer descriptions. Parameters
live outside the NetworkSpec in a name -> array mapping (``"conv1.w"``,
``"conv1.b"``, ...), usually held by a :class:`~covernet.checkpoint.WeightStore`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import nn
from .errors import InvalidParameterError, ShapeError, UnknownTensorError, WeightShapeError
from .optim import LrSchedule, lr_at

# ---------------------------------------------------------------------------
# layer descriptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv:
    name: str
    filters: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    pad: tuple[int, int] = (0, 0)
    groups: int = 1

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"{self.name}: needs an image input, got {shape}", axis="rank", layer=self.name)
        h, w, c = shape
        if c % self.groups:
            raise ShapeError(f"{self.name}: {c} channels not divisible by {self.groups} groups",
                             axis="channels", layer=self.name)
        oh = nn.conv_output_size(h, self.kernel[0], self.stride[0], self.pad[0])
        ow = nn.conv_output_size(w, self.kernel[1], self.stride[1], self.pad[1])
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.name}: input {h}x{w} too small", axis="height" if oh < 1 else "width",
                             layer=self.name)
        return (oh, ow, self.filters)

    def param_shapes(self, shape):
        cin = shape[2] // self.groups
        return {f"{self.name}.w": (self.filters, *self.kernel, cin), f"{self.name}.b": (self.filters,)}

    def fan_in(self, shape):
        return self.kernel[0] * self.kernel[1] * (shape[2] // self.groups)


@dataclass(frozen=True)
class Dense:
    name: str
    units: int

    def out_shape(self, shape):
        if len(shape) != 1:
            raise ShapeError(f"{self.name}: needs a flat input, got {shape}", axis="rank", layer=self.name)
        return (self.units,)

    def param_shapes(self, shape):
        return {f"{self.name}.w": (shape[0], self.units), f"{self.name}.b": (self.units,)}

    def fan_in(self, shape):
        return shape[0]


@dataclass(frozen=True)
class ReLU:
    name: str

    def out_shape(self, shape):
        return shape


@dataclass(frozen=True)
class LRN:
    name: str
    params: nn.LrnParams = field(default_factory=nn.LrnParams)

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"{self.name}: needs an image input", axis="rank", layer=self.name)
        return shape


@dataclass(frozen=True)
class MaxPool:
    name: str
    size: tuple[int, int]
    stride: tuple[int, int]

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"{self.name}: needs an image input", axis="rank", layer=self.name)
        h, w, c = shape
        if self.size[0] > h or self.size[1] > w:
            raise ShapeError(f"{self.name}: window larger than {h}x{w}", axis="height", layer=self.name)
        return ((h - self.size[0]) // self.stride[0] + 1, (w - self.size[1]) // self.stride[1] + 1, c)


@dataclass(frozen=True)
class Flatten:
    name: str

    def out_shape(self, shape):
        return (int(np.prod(shape)),)


@dataclass(frozen=True)
class Dropout:
    name: str
    keep_prob: float = 0.5

    def out_shape(self, shape):
        return shape


@dataclass(frozen=True)
class Softmax:
    name: str = "softmax"

    def out_shape(self, shape):
        if len(shape) != 1:
            raise ShapeError("softmax needs a flat input", axis="rank", layer=self.name)
        return shape


_PARAM_LAYERS = (Conv, Dense)


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple
    class_count: int

    def __post_init__(self):
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise InvalidParameterError("network must end in a softmax classifier")
        if sum(isinstance(l, Softmax) for l in self.layers) != 1:
            raise InvalidParameterError("exactly one softmax layer allowed")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise InvalidParameterError("layer names must be unique")
        out = self.layer_shapes()[-1][1]
        if out != (self.class_count,):
            raise ShapeError(f"network output {out} != ({self.class_count},)", axis="classes",
                             layer=self.layers[-1].name)

    def layer_shapes(self):
        """``[(layer_name, output_shape), ...]`` following the chain."""
        shape = tuple(self.input_shape)
        out = []
        for layer in self.layers:
            shape = layer.out_shape(shape)
            out.append((layer.name, shape))
        return out

    def param_shapes(self) -> dict:
        shape = tuple(self.input_shape)
        out = {}
        for layer in self.layers:
            if isinstance(layer, _PARAM_LAYERS):
                out.update(layer.param_shapes(shape))
            shape = layer.out_shape(shape)
        return out

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    @property
    def head(self) -> Dense:
        return [l for l in self.layers if isinstance(l, Dense)][-1]

    def with_classes(self, class_count):
        head = self.head
        layers = tuple(dataclasses.replace(l, units=class_count) if l is head else l for l in self.layers)
        return dataclasses.replace(self, layers=layers, class_count=class_count)


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

def build_alexnet30(class_count=30, keep_prob=0.5, lrn_params=None):
    """Canonical grouped AlexNet topology with a ``class_count``-way head, 227x227x3 input."""
    lp = lrn_params or nn.LrnParams()
    layers = (
        Conv("conv1", 96, (11, 11), (4, 4)), ReLU("relu1"), LRN("norm1", lp), MaxPool("pool1", (3, 3), (2, 2)),
        Conv("conv2", 256, (5, 5), pad=(2, 2), groups=2), ReLU("relu2"), LRN("norm2", lp),
        MaxPool("pool2", (3, 3), (2, 2)),
        Conv("conv3", 384, (3, 3), pad=(1, 1)), ReLU("relu3"),
        Conv("conv4", 384, (3, 3), pad=(1, 1), groups=2), ReLU("relu4"),
        Conv("conv5", 256, (3, 3), pad=(1, 1), groups=2), ReLU("relu5"), MaxPool("pool5", (3, 3), (2, 2)),
        Flatten("flatten"),
        Dense("fc6", 4096), ReLU("relu6"), Dropout("drop6", keep_prob),
        Dense("fc7", 4096), ReLU("relu7"), Dropout("drop7", keep_prob),
        Dense("fc8", class_count), Softmax(),
    )
    return NetworkSpec("alexnet30", (227, 227, 3), layers, class_count)


def build_lenet_variant(class_count=30, keep_prob=0.5, pool_stride_literal=False):
    """Three 5x5 conv layers (32/64/128) with 2x2 pooling, FC-1024, 56x56x3 input.

    ``pool_stride_literal`` pools with stride 1 instead of 2.
    """
    s = 1 if pool_stride_literal else 2
    layers = []
    for i, filters in enumerate((32, 64, 128), start=1):
        layers += [Conv(f"conv{i}", filters, (5, 5)), ReLU(f"relu{i}"), MaxPool(f"pool{i}", (2, 2), (s, s))]
    layers += [
        Flatten("flatten"),
        Dense("fc4", 1024), ReLU("relu4"), Dropout("drop4", keep_prob),
        Dense("fc5", class_count), Softmax(),
    ]
    return NetworkSpec("lenet", (56, 56, 3), tuple(layers), class_count)


def build_mini(class_count=3, channels=2, keep_prob=0.5):
    """8x8 two-conv network touching every layer kind; used for gradient checks."""
    layers = (
        Conv("conv1", 4, (3, 3), pad=(1, 1), groups=2), ReLU("relu1"),
        LRN("norm1", nn.LrnParams(depth_radius=1, bias=2.0, alpha=0.5, beta=0.75)),
        MaxPool("pool1", (2, 2), (2, 2)),
        Conv("conv2", 4, (3, 3)), ReLU("relu2"),
        Flatten("flatten"),
        Dense("fc3", 6), ReLU("relu3"), Dropout("drop3", keep_prob),
        Dense("fc4", class_count), Softmax(),
    )
    return NetworkSpec("mini", (8, 8, channels), layers, class_count)


def build_network(model: str, class_count=30, keep_prob=0.5, pool_stride_literal=False):
    if model == "alexnet30":
        return build_alexnet30(class_count, keep_prob)
    if model == "lenet":
        return build_lenet_variant(class_count, keep_prob, pool_stride_literal)
    if model == "mini":
        return build_mini(class_count, keep_prob=keep_prob)
    raise InvalidParameterError(f"unknown model {model!r}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _layer_fan_ins(spec):
    shape = tuple(spec.input_shape)
    fans = {}
    for layer in spec.layers:
        if isinstance(layer, _PARAM_LAYERS):
            fans[layer.name] = layer.fan_in(shape)
        shape = layer.out_shape(shape)
    return fans


def init_params(spec: NetworkSpec, rng, only=None) -> dict:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    dtype = nn.get_dtype()
    fans = _layer_fan_ins(spec)
    params = {}
    for name, shape in spec.param_shapes().items():
        layer = name.rsplit(".", 1)[0]
        if only is not None and layer not in only:
            continue
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            std = np.sqrt(2.0 / fans[layer])
            params[name] = (rng.standard_normal(shape, dtype=dtype) * dtype(std)).astype(dtype)
    return params


def _tensors(weights) -> Mapping[str, np.ndarray]:
    return getattr(weights, "tensors", weights)


def check_params(spec: NetworkSpec, weights, ignore_layers=()):
    params = _tensors(weights)
    expected = spec.param_shapes()
    for name in params:
        if name not in expected and name.rsplit(".", 1)[0] not in ignore_layers:
            raise UnknownTensorError(f"tensor {name!r} not in network {spec.name}")
    for name, shape in expected.items():
        layer = name.rsplit(".", 1)[0]
        if layer in ignore_layers:
            continue
        if name not in params:
            raise WeightShapeError(f"missing tensor {name!r}", axis="parameter", layer=layer)
        if tuple(params[name].shape) != tuple(shape):
            raise WeightShapeError(
                f"layer {layer}: tensor {name} has shape {params[name].shape}, expected {shape}",
                axis="parameter", layer=layer,
            )


def replace_head(spec: NetworkSpec, weights, class_count: int, rng):
    """Swap the final classifier for a fresh ``class_count``-way layer.

    Every other tensor is carried over as-is. Returns ``(spec, params)``.
    """
    new_spec = spec.with_classes(class_count)
    head = new_spec.head.name
    check_params(new_spec, weights, ignore_layers=(head,))
    old = _tensors(weights)
    fresh = init_params(new_spec, rng, only={head})
    params = {name: (fresh[name] if name in fresh else old[name]) for name in new_spec.param_shapes()}
    return new_spec, params


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _check_batch(spec, batch):
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(
            f"batch shape {batch.shape} does not match input {spec.input_shape}",
            axis="input", layer=spec.layers[0].name,
        )


def forward_trace(spec, weights, batch, mode="infer", rng=None, stop_before=None):
    """Run up to (not including) the softmax; return ``(logits, caches)``.

    ``stop_before`` halts ahead of the named layer and returns its input instead.
    """
    params = _tensors(weights)
    _check_batch(spec, batch)
    h = batch
    caches = []
    for layer in spec.layers:
        if layer.name == stop_before or isinstance(layer, Softmax):
            break
        if isinstance(layer, Conv):
            p = nn.ConvParams(params[f"{layer.name}.w"], params[f"{layer.name}.b"],
                              *layer.stride, *layer.pad, layer.groups)
            h, c = nn.conv2d_forward(h, p)
        elif isinstance(layer, Dense):
            h, c = nn.linear_forward(h, params[f"{layer.name}.w"], params[f"{layer.name}.b"])
        elif isinstance(layer, ReLU):
            h, c = nn.relu_forward(h)
        elif isinstance(layer, LRN):
            h, c = nn.lrn_forward(h, layer.params)
        elif isinstance(layer, MaxPool):
            h, c = nn.maxpool2d_forward(h, *layer.size, *layer.stride)
        elif isinstance(layer, Flatten):
            c = h.shape
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, Dropout):
            h, c = nn.dropout_forward(h, layer.keep_prob, mode, rng)
        else:
            raise InvalidParameterError(f"unsupported layer {layer!r}")
        caches.append((layer, c))
    return h, caches


def forward(spec, weights, batch, mode="infer", rng=None):
    """Class probabilities, batch x class_count."""
    logits, _ = forward_trace(spec, weights, batch, mode, rng)
    return nn.softmax(logits)


def penultimate(spec, weights, batch):
    """Activations feeding the classifier head (infer mode)."""
    return forward_trace(spec, weights, batch, "infer", stop_before=spec.head.name)[0]


def backward(caches, dlogits):
    grads = {}
    d = dlogits
    first = caches[0][0].name if caches else None
    for layer, c in reversed(caches):
        if isinstance(layer, Conv):
            d, gw, gb = nn.conv2d_backward(d, c, need_dx=layer.name != first)
            grads[f"{layer.name}.w"], grads[f"{layer.name}.b"] = gw, gb
        elif isinstance(layer, Dense):
            d, gw, gb = nn.linear_backward(d, c)
            grads[f"{layer.name}.w"], grads[f"{layer.name}.b"] = gw, gb
        elif isinstance(layer, ReLU):
            d = nn.relu_backward(d, c)
        elif isinstance(layer, LRN):
            d = nn.lrn_backward(d, c)
        elif isinstance(layer, MaxPool):
            d = nn.maxpool2d_backward(d, c)
        elif isinstance(layer, Flatten):
            d = d.reshape(c)
        elif isinstance(layer, Dropout):
            d = nn.dropout_backward(d, c)
    return grads


def input_gradient(caches, dlogits):
    """Gradient w.r.t. the input batch (the first conv keeps its dx)."""
    d = dlogits
    for layer, c in reversed(caches):
        if isinstance(layer, Conv):
            d = nn.conv2d_backward(d, c)[0]
        elif isinstance(layer, Dense):
            d = nn.linear_backward(d, c)[0]
        elif isinstance(layer, ReLU):
            d = nn.relu_backward(d, c)
        elif isinstance(layer, LRN):
            d = nn.lrn_backward(d, c)
        elif isinstance(layer, MaxPool):
            d = nn.maxpool2d_backward(d, c)
        elif isinstance(layer, Flatten):
            d = d.reshape(c)
        elif isinstance(layer, Dropout):
            d = nn.dropout_backward(d, c)
    return d


def loss_and_grads(spec, weights, batch, labels, rng=None, mode="train"):
    logits, caches = forward_trace(spec, weights, batch, mode, rng)
    probs, loss = nn.softmax_xent(logits, labels)
    grads = backward(caches, nn.softmax_xent_backward(probs, labels))
    return loss, grads


def train_step(spec, weights, optimizer, batch, labels, step, schedule: LrSchedule, rng=None, lr=None):
    """One forward, backward and optimizer update. Returns the mean batch loss.

    ``lr`` overrides the schedule (0 leaves the weights untouched).
    """
    params = _tensors(weights)
    loss, grads = loss_and_grads(spec, params, batch, labels, rng)
    rate = lr_at(schedule, step) if lr is None else lr
    optimizer.step(params, grads, rate)
    return loss

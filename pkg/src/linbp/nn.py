"""Layer graphs, forward execution and the f = g o h decomposition.

A :class:`Network` is an ordered list of :class:`LayerSpec` plus a parameter
map keyed by layer id. Ids are assigned in topological order, depth first, so
a residual block with id ``b`` owns children ``b+1 .. b+6``.

Split points are counted in *weight layers* (Dense and Conv2d, the ``W_i``
of a layered model). Boundary ``k`` means "the first ``k`` weight layers
belong to h, everything from the k-th weight layer on (0-based) belongs to
g". ``k = 0`` makes h the identity and ``k = d`` makes g the identity.
A boundary may not fall between the two convolutions of a residual block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, LabelError, ShapeError, SplitError

KINDS = ("Dense", "Conv2d", "ReLU", "BatchNorm", "MaxPool", "AvgPool", "Flatten", "ResidualBlock")
WEIGHTED = ("Dense", "Conv2d")
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

# Role of the ReLUs owned by a residual block. The post-addition ReLU is the
# "first type": LinBP switches it to linear backward in the tail, while the
# in-branch ReLU feeds the masked/linear branch-gradient pair.
ROLE_BRANCH = "branch"
ROLE_POST_ADD = "post_add"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    attrs: dict = field(default_factory=dict)
    children: tuple = ()
    id: int = -1
    role: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")

    @classmethod
    def dense(cls, in_features, out_features):
        return cls("Dense", {"in_features": int(in_features), "out_features": int(out_features)})

    @classmethod
    def conv(cls, in_channels, out_channels, kernel=3, stride=1, pad=0):
        return cls("Conv2d", {"in_channels": int(in_channels), "out_channels": int(out_channels),
                              "kernel": int(kernel), "stride": int(stride), "pad": int(pad)})

    @classmethod
    def relu(cls, role=""):
        return cls("ReLU", role=role)

    @classmethod
    def batchnorm(cls, channels):
        return cls("BatchNorm", {"channels": int(channels)})

    @classmethod
    def maxpool(cls, kernel=2, stride=None):
        return cls("MaxPool", {"kernel": int(kernel), "stride": int(stride or kernel)})

    @classmethod
    def avgpool(cls, kernel=2, stride=None):
        return cls("AvgPool", {"kernel": int(kernel), "stride": int(stride or kernel)})

    @classmethod
    def flatten(cls):
        return cls("Flatten")

    @classmethod
    def residual(cls, channels, kernel=3):
        """conv-BN-ReLU-conv-BN main branch, identity skip, post-addition ReLU."""
        pad = kernel // 2
        children = (
            cls.conv(channels, channels, kernel, 1, pad),
            cls.batchnorm(channels),
            cls.relu(ROLE_BRANCH),
            cls.conv(channels, channels, kernel, 1, pad),
            cls.batchnorm(channels),
            cls.relu(ROLE_POST_ADD),
        )
        return cls("ResidualBlock", {"channels": int(channels)}, children)

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()

    @property
    def weight_count(self):
        return sum(1 for s in self.walk() if s.kind in WEIGHTED)

    def describe(self):
        args = ", ".join(f"{k}={v}" for k, v in self.attrs.items())
        if self.role:
            args = f"{args}, role={self.role}" if args else f"role={self.role}"
        return f"{self.id:3d} {self.kind}({args})"

    def to_dict(self):
        out = {"kind": self.kind, "id": self.id, "attrs": dict(self.attrs)}
        if self.role:
            out["role"] = self.role
        if self.children:
            out["children"] = [c.to_dict() for c in self.children]
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["kind"],
            {k: int(v) for k, v in d.get("attrs", {}).items()},
            tuple(cls.from_dict(c) for c in d.get("children", [])),
            int(d["id"]),
            d.get("role", ""),
        )


def assign_ids(specs, start=0):
    """Return copies of ``specs`` with depth-first contiguous ids."""
    out = []
    next_id = start
    for spec in specs:
        children, after = assign_ids(spec.children, next_id + 1)
        out.append(replace(spec, id=next_id, children=tuple(children)))
        next_id = after
    return out, next_id


def param_shapes(spec):
    a = spec.attrs
    if spec.kind == "Dense":
        return {"weight": (a["in_features"], a["out_features"]), "bias": (a["out_features"],)}
    if spec.kind == "Conv2d":
        k = a["kernel"]
        return {"weight": (a["out_channels"], a["in_channels"], k, k), "bias": (a["out_channels"],)}
    if spec.kind == "BatchNorm":
        c = (a["channels"],)
        return {"gamma": c, "beta": c, "running_mean": c, "running_var": c}
    return {}


# Serialization order of each layer's arrays inside a checkpoint blob.
PARAM_ORDER = {
    "Dense": ("weight", "bias"),
    "Conv2d": ("weight", "bias"),
    "BatchNorm": ("gamma", "beta", "running_mean", "running_var"),
}


def _out_shape(spec, shape):
    a = spec.attrs
    k = spec.kind

    def fail(why):
        raise ShapeError(f"layer {spec.id} ({k}): {why}; input shape {tuple(shape)}")

    if k == "Dense":
        if shape != (a["in_features"],):
            fail(f"expects ({a['in_features']},)")
        return (a["out_features"],)
    if k == "Conv2d":
        if len(shape) != 3 or shape[0] != a["in_channels"]:
            fail(f"expects ({a['in_channels']}, H, W)")
        try:
            ho = T.conv_output_size(shape[1], a["kernel"], a["stride"], a["pad"])
            wo = T.conv_output_size(shape[2], a["kernel"], a["stride"], a["pad"])
        except ConfigError as exc:
            fail(str(exc))
        return (a["out_channels"], ho, wo)
    if k == "BatchNorm":
        if len(shape) not in (1, 3) or shape[0] != a["channels"]:
            fail(f"expects {a['channels']} channels")
        return shape
    if k in ("MaxPool", "AvgPool"):
        if len(shape) != 3:
            fail("expects (C, H, W)")
        try:
            ho = T.conv_output_size(shape[1], a["kernel"], a["stride"], 0)
            wo = T.conv_output_size(shape[2], a["kernel"], a["stride"], 0)
        except ConfigError as exc:
            fail(str(exc))
        return (shape[0], ho, wo)
    if k == "Flatten":
        return (math.prod(shape),)
    if k == "ResidualBlock":
        s = shape
        for child in spec.children:
            s = _out_shape(child, s)
        if s != shape:
            fail(f"main branch changes shape to {s}")
        return shape
    return shape


@dataclass
class Network:
    """Layer list plus parameters.

    ``params`` maps layer id to a dict of float32 arrays. Dense weights are
    stored ``(in, out)`` so a layer computes ``x @ W + b``.
    """

    layers: tuple
    params: dict
    input_shape: tuple
    num_classes: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        ids = [s.id for top in self.layers for s in top.walk()]
        if ids and ids != list(range(ids[0], ids[0] + len(ids))):
            raise ConfigError(f"layer ids must be unique and contiguous, got {ids}")
        for spec in self.all_layers():
            expected = param_shapes(spec)
            got = self.params.get(spec.id, {})
            for name, shp in expected.items():
                if name not in got:
                    raise ConfigError(f"layer {spec.id} ({spec.kind}) is missing parameter {name!r}")
                if tuple(got[name].shape) != shp:
                    raise ShapeError(
                        f"layer {spec.id} ({spec.kind}) parameter {name} has shape "
                        f"{tuple(got[name].shape)}, expected {shp}"
                    )
        shapes = []
        s = self.input_shape
        for spec in self.layers:
            s = _out_shape(spec, s)
            shapes.append(s)
        self.shapes = shapes

    @classmethod
    def build(cls, specs, input_shape, num_classes, seed=0, metadata=None):
        """Assign ids, He-initialize weights and check the output is ``(num_classes,)``."""
        specs, _ = assign_ids(specs)
        rng = T.make_rng(seed)
        params = {}
        for top in specs:
            for spec in top.walk():
                shapes = param_shapes(spec)
                if not shapes:
                    continue
                p = {}
                if spec.kind in WEIGHTED:
                    w = shapes["weight"]
                    fan_in = w[0] if spec.kind == "Dense" else math.prod(w[1:])
                    p["weight"] = T.as_tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=w))
                    p["bias"] = np.zeros(shapes["bias"], dtype=T.FLOAT)
                else:
                    c = shapes["gamma"]
                    p = {"gamma": np.ones(c, T.FLOAT), "beta": np.zeros(c, T.FLOAT),
                         "running_mean": np.zeros(c, T.FLOAT), "running_var": np.ones(c, T.FLOAT)}
                params[spec.id] = p
        net = cls(specs, params, input_shape, num_classes, dict(metadata or {}))
        if net.output_shape != (num_classes,):
            raise ShapeError(f"network output shape {net.output_shape} != ({num_classes},)")
        return net

    @property
    def output_shape(self):
        return self.shapes[-1] if self.shapes else self.input_shape

    def all_layers(self):
        for top in self.layers:
            yield from top.walk()

    def layer(self, layer_id):
        for spec in self.all_layers():
            if spec.id == layer_id:
                return spec
        raise KeyError(layer_id)

    @property
    def depth(self):
        """Number of weight layers ``d``."""
        return sum(s.weight_count for s in self.layers)

    def boundaries(self):
        """Map each legal split index ``k`` to the top-level position where g starts."""
        out = {0: 0}
        count = 0
        for pos, spec in enumerate(self.layers):
            if spec.weight_count and count not in out:
                out[count] = pos
            count += spec.weight_count
        out.setdefault(count, len(self.layers))
        return out

    def boundary(self, k):
        legal = self.boundaries()
        if k not in legal:
            raise SplitError(f"split index {k} is not a legal boundary; legal: {sorted(legal)}")
        return legal[k]

    def boundary_id(self, k):
        """Layer id where g starts for split index ``k`` (one past the last id when g is empty)."""
        pos = self.boundary(k)
        if pos < len(self.layers):
            return self.layers[pos].id
        ids = [s.id for s in self.all_layers()]
        return ids[-1] + 1 if ids else 0

    def copy(self):
        """Deep copy of the parameters, sharing the (immutable) layer specs."""
        params = {i: {n: a.copy() for n, a in p.items()} for i, p in self.params.items()}
        return Network(self.layers, params, self.input_shape, self.num_classes, dict(self.metadata))

    def summary(self):
        lines = [f"input {self.input_shape} -> {self.num_classes} classes, {self.depth} weight layers"]
        for spec, shape in zip(self.layers, self.shapes):
            lines.append(f"{spec.describe()} -> {shape}")
            for child in list(spec.walk())[1:]:
                lines.append(f"    {child.describe()}")
        return "\n".join(lines)


@dataclass
class ActivationTape:
    """Everything a backward pass needs from one forward call.

    ``records[layer_id]`` holds the layer's cached values: ``pre`` and
    ``mask`` for ReLUs, ``xhat``/``inv_std`` for batch norm, ``argmax`` for
    max pooling, the input for dense layers, the patch matrix for convs.
    All cached arrays carry a leading batch axis.
    """

    network: Network
    records: dict
    logits: np.ndarray
    train_mode: bool
    batched: bool

    def mask(self, layer_id):
        return self.records[layer_id]["mask"]

    def pre_activation(self, layer_id):
        return self.records[layer_id]["pre"]


def _forward_layer(spec, params, x, train, records, frozen_below=None):
    k = spec.kind
    rec = {}
    if train and frozen_below is not None and spec.id < frozen_below:
        train = False
    if k == "Dense":
        p = params[spec.id]
        rec["x"] = x
        y = x @ p["weight"] + p["bias"]
    elif k == "Conv2d":
        p = params[spec.id]
        a = spec.attrs
        y, cols = T.conv2d_forward(x, p["weight"], p["bias"], a["stride"], a["pad"])
        rec["x_shape"] = x.shape
        rec["cols"] = cols
    elif k == "ReLU":
        mask = (x > 0).astype(x.dtype)
        rec["pre"] = x
        rec["mask"] = mask
        y = x * mask
    elif k == "BatchNorm":
        p = params[spec.id]
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            rec["batch_mean"] = mean
            rec["batch_var"] = var
            rec["count"] = x.size // x.shape[1]
        else:
            mean = p["running_mean"]
            var = p["running_var"]
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(BN_EPS))
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        rec["xhat"] = xhat
        rec["inv_std"] = inv_std
        rec["train"] = train
        y = p["gamma"].reshape(bshape) * xhat + p["beta"].reshape(bshape)
    elif k == "MaxPool":
        a = spec.attrs
        y, idx = T.maxpool2d(x, a["kernel"], a["stride"])
        rec["x_shape"] = x.shape
        rec["argmax"] = idx
    elif k == "AvgPool":
        a = spec.attrs
        y = T.avgpool2d(x, a["kernel"], a["stride"])
        rec["x_shape"] = x.shape
    elif k == "Flatten":
        rec["x_shape"] = x.shape
        y = x.reshape(x.shape[0], -1)
    elif k == "ResidualBlock":
        # the skip joins right before the post-addition ReLU, or at the end
        # of the block once surgery has removed that ReLU
        z = x
        added = False
        for child in spec.children:
            if child.role == ROLE_POST_ADD:
                z = z + x
                added = True
            z = _forward_layer(child, params, z, train, records, frozen_below)
        y = z if added else z + x
    records[spec.id] = rec
    return y


def _batch_input(net, x):
    x = np.asarray(x)
    if x.dtype != np.float64:
        x = x.astype(T.FLOAT, copy=False)
    if x.shape == net.input_shape:
        return x[None], False
    if x.ndim == len(net.input_shape) + 1 and x.shape[1:] == net.input_shape:
        return x, True
    raise ShapeError(f"input shape {x.shape} does not match network input {net.input_shape}")


def forward(net: Network, x, train_mode: bool = False, frozen_below: int | None = None):
    """Run ``net`` on ``x`` and record an :class:`ActivationTape`.

    ``x`` may be one example shaped ``net.input_shape`` or a batch with a
    leading axis; the logits follow the same convention. Float64 input is
    carried through in float64 (used by the finite-difference oracle);
    anything else is computed in float32. ``train_mode`` uses batch
    statistics in batch-norm layers; running statistics are not touched here.
    Batch-norm layers with id below ``frozen_below`` keep running statistics
    even in train mode.
    """
    xb, batched = _batch_input(net, x)
    records = {}
    for spec in net.layers:
        xb = _forward_layer(spec, net.params, xb, train_mode, records, frozen_below)
    tape = ActivationTape(net, records, xb, train_mode, batched)
    return (xb if batched else xb[0]), tape


def loss_ce(logits, y):
    """Softmax cross-entropy and its gradient with respect to the logits.

    For a batch, returns per-example losses (not averaged) and per-example
    gradients.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    labels = np.atleast_1d(np.asarray(y))
    c = z.shape[1]
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {z.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"class index out of range [0, {c}): {labels}")
    labels = labels.astype(np.int64)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(z.shape[0])
    loss = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def split(net: Network, k: int):
    """Split into ``(h, g)`` views sharing parameters with ``net``."""
    pos = net.boundary(k)

    def view(layers, input_shape):
        ids = {s.id for top in layers for s in top.walk()}
        params = {i: p for i, p in net.params.items() if i in ids}
        return Network(layers, params, input_shape, net.num_classes, dict(net.metadata))

    mid_shape = net.shapes[pos - 1] if pos else net.input_shape
    return view(net.layers[:pos], net.input_shape), view(net.layers[pos:], mid_shape)


def predict(net: Network, x, batch_size: int = 256):
    """Arg-max class; ties go to the lowest index."""
    xb, batched = _batch_input(net, x)
    out = np.empty(xb.shape[0], dtype=np.int64)
    for i in range(0, xb.shape[0], batch_size):
        logits, _ = forward(net, xb[i:i + batch_size])
        out[i:i + batch_size] = logits.argmax(axis=1)
    return out if batched else int(out[0])


def accuracy(net: Network, dataset, batch_size: int = 256) -> float:
    images, labels = (dataset.images, dataset.labels) if hasattr(dataset, "images") else dataset
    if len(labels) == 0:
        raise ConfigError("accuracy of an empty dataset is undefined")
    pred = predict(net, np.asarray(images), batch_size)
    return float(np.mean(pred == np.asarray(labels)))

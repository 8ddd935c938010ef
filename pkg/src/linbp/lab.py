"""Model surgery, SGD training and checkpoint files.

Checkpoint layout (all integers little-endian)::

    b"LBPF"                 magic
    u8                      format version (currently 1)
    u32                     descriptor length in bytes
    descriptor              UTF-8 JSON: input_shape, num_classes, layers, metadata
    per parameterized layer, in layer-id order:
        u32                 element count
        float32[count]      arrays concatenated in PARAM_ORDER

``PARAM_ORDER`` is Dense/Conv2d: weight, bias; BatchNorm: gamma, beta,
running_mean, running_var. Dense weights are ``(in, out)``, conv weights
``(out, in, k, k)``, all C order. Residual-block ReLUs carry their role
(``branch`` or ``post_add``) in the descriptor.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .engine import gradients
from .errors import ConfigError, FormatError, IntegrityError, TrainingError, VersionError
from .nn import (
    BN_MOMENTUM,
    PARAM_ORDER,
    LayerSpec,
    Network,
    accuracy,
    assign_ids,
    forward,
    loss_ce,
    param_shapes,
)

log = logging.getLogger(__name__)

MAGIC = b"LBPF"
FORMAT_VERSION = 1


# -- surgery -----------------------------------------------------------------

def _legal_cut_ids(net):
    ids = [top.id for top in net.layers]
    end = max((s.id for s in net.all_layers()), default=-1) + 1
    return ids + [end]


def _strip(spec, from_layer):
    children = tuple(
        _strip(c, from_layer) for c in spec.children
        if not (c.kind == "ReLU" and c.id >= from_layer)
    )
    return replace(spec, children=children)


def lins_remove_relus(net: Network, from_layer: int) -> Network:
    """Delete every ReLU with id >= ``from_layer`` from the graph.

    ``from_layer`` must be the id of a top-level layer (or one past the last
    id). The result is linear from that point on in forward and backward.
    Parameter arrays are shared with ``net``; ids are renumbered.
    """
    legal = _legal_cut_ids(net)
    if from_layer not in legal:
        raise ConfigError(f"from_layer {from_layer} is not a top-level layer id; legal: {legal}")
    kept = [_strip(top, from_layer) for top in net.layers
            if not (top.kind == "ReLU" and top.id >= from_layer)]
    removed = sum(1 for s in net.all_layers() if s.kind == "ReLU" and s.id >= from_layer)
    if not removed:
        log.warning("lins_remove_relus: no ReLU at or after layer %d; network unchanged", from_layer)
    old_ids = [s.id for top in kept for s in top.walk()]
    renumbered, _ = assign_ids(kept)
    new_ids = [s.id for top in renumbered for s in top.walk()]
    mapping = dict(zip(old_ids, new_ids))
    params = {mapping[i]: p for i, p in net.params.items() if i in mapping}
    meta = dict(net.metadata)
    meta["lins_from_layer"] = int(from_layer)
    return Network(renumbered, params, net.input_shape, net.num_classes, meta)


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainSpec:
    epochs: int
    batch_size: int = 64
    learning_rate: float = 0.05
    decay_epochs: tuple | None = None
    decay_factor: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    freeze_prefix: int | None = None
    augment: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay factor must lie in (0, 1], got {self.decay_factor}")
        if self.weight_decay < 0 or self.momentum < 0:
            raise ConfigError("weight_decay and momentum must be non-negative")

    def milestones(self):
        if self.decay_epochs is not None:
            return tuple(sorted(int(e) for e in self.decay_epochs))
        return tuple(sorted({e for e in (self.epochs // 2, (3 * self.epochs) // 4) if e > 0}))

    def lr_at(self, epoch):
        cuts = sum(1 for e in self.milestones() if epoch >= e)
        return self.learning_rate * self.decay_factor ** cuts


def _augment(x, rng, pad=2):
    """Random horizontal flip and random crop from a zero-padded copy."""
    n, _, h, w = x.shape
    flip = rng.random(n) < 0.5
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    return np.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])


def _update_running_stats(net, tape, frozen_below):
    for spec in net.all_layers():
        if spec.kind != "BatchNorm":
            continue
        if frozen_below is not None and spec.id < frozen_below:
            continue
        rec = tape.records[spec.id]
        if not rec["train"]:
            continue
        m = rec["count"]
        p = net.params[spec.id]
        unbiased = rec["batch_var"] * (m / max(m - 1, 1))
        keep = T.FLOAT(BN_MOMENTUM)
        p["running_mean"] = (keep * p["running_mean"] + (1 - keep) * rec["batch_mean"]).astype(T.FLOAT)
        p["running_var"] = (keep * p["running_var"] + (1 - keep) * unbiased).astype(T.FLOAT)


def train(net: Network, dataset, spec: TrainSpec, test_set=None):
    """SGD with momentum and weight decay on mean cross-entropy.

    Returns ``(trained_copy, metrics)``; ``net`` itself is left untouched.
    Parameters of layers with id below ``spec.freeze_prefix`` are never
    modified (their batch-norm layers also run on running statistics).
    ``metrics`` has one dict per epoch: epoch, lr, loss, train_acc and, when
    ``test_set`` is given, test_acc.
    """
    images = np.asarray(dataset.images, dtype=T.FLOAT)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(labels) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise ConfigError(f"labels must lie in [0, {net.num_classes})")
    out = net.copy()
    frozen = spec.freeze_prefix
    rng = T.make_rng(spec.rng_seed)
    velocity = {}
    metrics = []
    n = len(labels)
    for epoch in range(spec.epochs):
        lr = T.FLOAT(spec.lr_at(epoch))
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            xb = images[idx]
            if spec.augment:
                xb = _augment(xb, rng)
            yb = labels[idx]
            logits, tape = forward(out, xb, train_mode=True, frozen_below=frozen)
            losses, dlogits = loss_ce(logits, yb)
            if not np.all(np.isfinite(losses)):
                raise TrainingError(f"loss diverged (non-finite) in epoch {epoch}", epoch=epoch)
            total_loss += float(losses.sum())
            correct += int((logits.argmax(axis=1) == yb).sum())
            _, grads = gradients(out, tape, dlogits / T.FLOAT(len(idx)), frozen_below=frozen)
            for lid, named in grads.items():
                p = out.params[lid]
                for name, g in named.items():
                    g = g + T.FLOAT(spec.weight_decay) * p[name]
                    key = (lid, name)
                    v = velocity.get(key)
                    v = g if v is None else T.FLOAT(spec.momentum) * v + g
                    velocity[key] = v
                    p[name] = (p[name] - lr * v).astype(T.FLOAT)
            _update_running_stats(out, tape, frozen)
        row = {"epoch": epoch, "lr": float(lr), "loss": total_loss / n, "train_acc": correct / n}
        if not math.isfinite(row["loss"]):
            raise TrainingError(f"loss diverged (non-finite) in epoch {epoch}", epoch=epoch)
        if test_set is not None:
            row["test_acc"] = accuracy(out, test_set)
        metrics.append(row)
        log.info("epoch %d lr %.4g loss %.4f train %.3f%s", epoch, row["lr"], row["loss"],
                 row["train_acc"], f" test {row['test_acc']:.3f}" if "test_acc" in row else "")
    meta = {"epochs": out.metadata.get("epochs", 0) + spec.epochs, "rng_seed": spec.rng_seed}
    if metrics:
        meta["train_acc"] = metrics[-1]["train_acc"]
        if "test_acc" in metrics[-1]:
            meta["test_acc"] = metrics[-1]["test_acc"]
    out.metadata.update(meta)
    return out, metrics


# -- checkpoints -------------------------------------------------------------

def _descriptor(net):
    return {
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "layers": [s.to_dict() for s in net.layers],
        "metadata": net.metadata,
    }


def to_bytes(net: Network) -> bytes:
    desc = json.dumps(_descriptor(net), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<BI", FORMAT_VERSION, len(desc)), desc]
    for spec in sorted(net.all_layers(), key=lambda s: s.id):
        if spec.kind not in PARAM_ORDER:
            continue
        p = net.params[spec.id]
        flat = np.concatenate([p[name].astype("<f4").ravel() for name in PARAM_ORDER[spec.kind]])
        parts.append(struct.pack("<I", flat.size))
        parts.append(flat.tobytes())
    return b"".join(parts)


def from_bytes(data: bytes, origin="<bytes>") -> Network:
    if len(data) < 9 or data[:4] != MAGIC:
        raise FormatError(f"{origin}: not a checkpoint (bad magic)")
    version, length = struct.unpack_from("<BI", data, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"{origin}: checkpoint version {version}, this build reads version {FORMAT_VERSION}")
    pos = 9 + length
    if pos > len(data):
        raise IntegrityError(f"{origin}: descriptor runs past end of file")
    try:
        desc = json.loads(data[9:pos].decode("utf-8"))
        specs = [LayerSpec.from_dict(d) for d in desc["layers"]]
        input_shape = tuple(desc["input_shape"])
        num_classes = int(desc["num_classes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise IntegrityError(f"{origin}: unreadable architecture descriptor: {exc}") from exc
    params = {}
    flat_specs = sorted((s for top in specs for s in top.walk()), key=lambda s: s.id)
    for spec in flat_specs:
        if spec.kind not in PARAM_ORDER:
            continue
        shapes = param_shapes(spec)
        want = sum(math.prod(shapes[name]) for name in PARAM_ORDER[spec.kind])
        if pos + 4 > len(data):
            raise IntegrityError(f"{origin}: truncated before layer {spec.id}")
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if count != want:
            raise IntegrityError(f"{origin}: layer {spec.id} stores {count} values, architecture needs {want}")
        end = pos + 4 * count
        if end > len(data):
            raise IntegrityError(f"{origin}: truncated inside layer {spec.id}")
        flat = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(T.FLOAT)
        pos = end
        p = {}
        off = 0
        for name in PARAM_ORDER[spec.kind]:
            size = math.prod(shapes[name])
            p[name] = flat[off:off + size].reshape(shapes[name]).copy()
            off += size
        params[spec.id] = p
    if pos != len(data):
        raise IntegrityError(f"{origin}: {len(data) - pos} trailing bytes after parameter blobs")
    try:
        return Network(specs, params, input_shape, num_classes, desc.get("metadata", {}))
    except (ConfigError, ValueError) as exc:
        raise IntegrityError(f"{origin}: inconsistent checkpoint: {exc}") from exc


def save(net: Network, path) -> None:
    path = Path(path)
    try:
        path.write_bytes(to_bytes(net))
    except OSError as exc:
        raise FormatError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path) -> Network:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data, str(path))


# -- model zoo ---------------------------------------------------------------

def _conv_bn_relu(cin, cout, bn=True):
    out = [LayerSpec.conv(cin, cout, 3, 1, 1)]
    if bn:
        out.append(LayerSpec.batchnorm(cout))
    out.append(LayerSpec.relu())
    return out


def vgg_specs(size, num_classes, widths=(16, 32, 64, 64), hidden=64, channels=3, bn=True, convs=1):
    """Plain conv net: ``convs`` conv-BN-ReLU layers and a max-pool per width, then a dense head."""
    specs = []
    cin = channels
    s = size
    for w in widths:
        for _ in range(convs):
            specs += _conv_bn_relu(cin, w, bn)
            cin = w
        if s % 2 == 0 and s > 1:
            specs.append(LayerSpec.maxpool(2))
            s //= 2
        cin = w
    specs += [LayerSpec.flatten(), LayerSpec.dense(cin * s * s, hidden), LayerSpec.relu(),
              LayerSpec.dense(hidden, num_classes)]
    return specs


def resnet_specs(size, num_classes, width=16, blocks=3, channels=3):
    """Stem conv, ``blocks`` residual blocks with a downsampling conv between halves, avg-pool head."""
    specs = _conv_bn_relu(channels, width)
    first = (blocks + 1) // 2
    for _ in range(first):
        specs.append(LayerSpec.residual(width))
    s = size
    specs.append(LayerSpec.maxpool(2))
    s //= 2
    specs += _conv_bn_relu(width, 2 * width)
    for _ in range(blocks - first):
        specs.append(LayerSpec.residual(2 * width))
    specs += [LayerSpec.avgpool(s), LayerSpec.flatten(), LayerSpec.dense(2 * width, num_classes)]
    return specs


def mlp_specs(input_shape, num_classes, hidden=(512, 256), bn=True):
    specs = [LayerSpec.flatten()]
    n = math.prod(input_shape)
    for h in hidden:
        specs.append(LayerSpec.dense(n, h))
        if bn:
            specs.append(LayerSpec.batchnorm(h))
        specs.append(LayerSpec.relu())
        n = h
    specs.append(LayerSpec.dense(n, num_classes))
    return specs


ZOO = {
    "vgg": lambda shape, c: vgg_specs(shape[-1], c, channels=shape[0]),
    "vgg_deep": lambda shape, c: vgg_specs(shape[-1], c, channels=shape[0], convs=2),
    "vgg_wide": lambda shape, c: vgg_specs(shape[-1], c, widths=(32, 64, 96), hidden=128, channels=shape[0]),
    "resnet": lambda shape, c: resnet_specs(shape[-1], c, channels=shape[0]),
    "mlp": lambda shape, c: mlp_specs(shape, c),
}


def build_model(arch: str, input_shape, num_classes, seed=0) -> Network:
    if arch not in ZOO:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of {sorted(ZOO)}")
    specs = ZOO[arch](tuple(input_shape), num_classes)
    return Network.build(specs, input_shape, num_classes, seed=seed, metadata={"arch": arch})

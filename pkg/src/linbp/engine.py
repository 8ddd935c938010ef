"""Backward passes with per-ReLU mode switching.

A :class:`BackpropPlan` says, for every ReLU, whether its backward applies
the forward mask (``MASKED``, ordinary backprop) or passes the gradient
through untouched (``LINEAR``). The forward pass is never changed.

Residual blocks in the linearized tail (at or after the split boundary)
combine their skip and main-branch gradients as

    g_out = g_sum + lambda * alpha * g_linear

where ``g_linear`` is the main-branch gradient with the in-branch ReLU
linear, and ``alpha = ||g_masked|| / ||g_linear||`` restores the magnitude
the masked branch would have carried. ``alpha`` is computed per example
from the backward vectors; no Jacobian is ever materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, StaleTapeError
from .nn import ROLE_POST_ADD, ActivationTape, Network

ALPHA_EPS = 1e-12


class ReluMode(str, Enum):
    MASKED = "masked"
    LINEAR = "linear"


MASKED = ReluMode.MASKED
LINEAR = ReluMode.LINEAR


@dataclass(frozen=True)
class BackpropPlan:
    """How to run the backward pass.

    ``split_k`` is a weight-layer boundary (see :mod:`linbp.nn`); ``None``
    means there is no linearized tail. ReLUs absent from ``relu_modes`` are
    ``MASKED``. Use :meth:`standard` or :meth:`linbp` unless you really need
    a hand-written mode map (:meth:`expert`).
    """

    relu_modes: dict = field(default_factory=dict)
    split_k: int | None = None
    renormalize: bool = True
    sgm_lambda: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.sgm_lambda <= 1.0:
            raise ConfigError(f"sgm_lambda must lie in (0, 1], got {self.sgm_lambda}")
        for lid, mode in self.relu_modes.items():
            if not isinstance(mode, ReluMode):
                raise ConfigError(f"relu mode for layer {lid} must be a ReluMode, got {mode!r}")

    @classmethod
    def standard(cls):
        return cls({}, None, False, 1.0)

    @classmethod
    def linbp(cls, net: Network, split_k: int, renormalize: bool = True, sgm_lambda: float = 1.0):
        """Masked before boundary ``split_k``, linear from it to the logits."""
        pos = net.boundary(split_k)
        modes = {}
        for i, top in enumerate(net.layers):
            for spec in top.walk():
                if spec.kind == "ReLU":
                    modes[spec.id] = LINEAR if i >= pos else MASKED
        return cls(modes, split_k, renormalize, sgm_lambda)

    @classmethod
    def expert(cls, relu_modes, split_k=None, renormalize=True, sgm_lambda=1.0):
        return cls({int(k): ReluMode(v) for k, v in relu_modes.items()}, split_k, renormalize, sgm_lambda)

    def mode(self, layer_id) -> ReluMode:
        return self.relu_modes.get(layer_id, MASKED)

    @property
    def is_standard(self):
        return self.split_k is None and all(m is MASKED for m in self.relu_modes.values())


STANDARD = BackpropPlan.standard()


@dataclass
class BranchGradients:
    """Main-branch gradients of one residual block, one row per example."""

    block_id: int
    g_masked: np.ndarray | None
    g_linear: np.ndarray | None
    alpha: np.ndarray


def relu_backward(g_in, mask, mode: ReluMode):
    g_in = np.asarray(g_in)
    mask = np.asarray(mask)
    if g_in.shape != mask.shape:
        raise ShapeError(f"relu_backward: gradient {g_in.shape} vs mask {mask.shape}")
    if ReluMode(mode) is LINEAR:
        return g_in
    return g_in * mask.astype(g_in.dtype, copy=False)


def _norms(g):
    n = g.shape[0]
    return np.linalg.norm(g.reshape(n, -1).astype(np.float64), axis=1)


def _alpha_rows(g_masked, g_linear):
    num = _norms(g_masked)
    den = _norms(g_linear)
    small = den < ALPHA_EPS
    return np.where(small, 1.0, num / np.where(small, 1.0, den))


def compute_alpha(g_masked, g_linear) -> float:
    """``||g_masked||_2 / ||g_linear||_2``, or 1 when the denominator vanishes."""
    g_masked = np.asarray(g_masked)
    g_linear = np.asarray(g_linear)
    if g_masked.shape != g_linear.shape:
        raise ShapeError(f"compute_alpha: {g_masked.shape} vs {g_linear.shape}")
    return float(_alpha_rows(g_masked.reshape(1, -1), g_linear.reshape(1, -1))[0])


def _bshape(ndim):
    return (1, -1) if ndim == 2 else (1, -1, 1, 1)


class _Backward:
    def __init__(self, net, tape, plan, want_params=False, frozen_below=None, branch_log=None):
        if tape.network is not net:
            raise StaleTapeError("activation tape was recorded on a different network")
        self.net = net
        self.tape = tape
        self.plan = plan
        self.want_params = want_params
        self.frozen_below = frozen_below
        self.branch_log = branch_log
        self.param_grads = {}
        if plan.split_k is None:
            self.tail_start = len(net.layers)
        else:
            self.tail_start = net.boundary(plan.split_k)

    def run(self, g, need_input=True):
        layers = self.net.layers
        for pos in range(len(layers) - 1, -1, -1):
            need = need_input or pos > 0
            g = self.layer(layers[pos], g, in_tail=pos >= self.tail_start, need_input=need)
        return g

    def _store(self, spec, grads):
        if not self.want_params:
            return
        if self.frozen_below is not None and spec.id < self.frozen_below:
            return
        self.param_grads[spec.id] = grads

    def layer(self, spec, g, in_tail=False, need_input=True, mode=None):
        rec = self.tape.records[spec.id]
        k = spec.kind
        if k == "ReLU":
            return relu_backward(g, rec["mask"], mode or self.plan.mode(spec.id))
        if k == "Dense":
            w = self.net.params[spec.id]["weight"]
            self._store(spec, lambda: {"weight": rec["x"].T @ g, "bias": g.sum(axis=0)})
            return g @ w.T if need_input else None
        if k == "Conv2d":
            w = self.net.params[spec.id]["weight"]
            a = spec.attrs
            self._store(spec, lambda: dict(zip(("weight", "bias"),
                                               T.conv2d_backward_params(g, rec["cols"], w.shape))))
            if not need_input:
                return None
            return T.conv2d_backward_input(g, w, rec["x_shape"], a["stride"], a["pad"])
        if k == "BatchNorm":
            return self._batchnorm(spec, rec, g)
        if k == "MaxPool":
            a = spec.attrs
            return T.maxpool2d_backward(g, rec["argmax"], rec["x_shape"], a["kernel"], a["stride"])
        if k == "AvgPool":
            a = spec.attrs
            return T.avgpool2d_backward(g, rec["x_shape"], a["kernel"], a["stride"])
        if k == "Flatten":
            return g.reshape(rec["x_shape"])
        if k == "ResidualBlock":
            post = [c for c in spec.children if c.role == ROLE_POST_ADD]
            g_sum = self.layer(post[0], g) if post else g
            g_out, _ = self.residual(spec, g_sum, in_tail)
            return g_out
        raise ConfigError(f"no backward rule for {k}")

    def _batchnorm(self, spec, rec, g):
        p = self.net.params[spec.id]
        bshape = _bshape(g.ndim)
        axes = (0,) if g.ndim == 2 else (0, 2, 3)
        xhat = rec["xhat"]
        inv_std = rec["inv_std"].reshape(bshape)
        gamma = p["gamma"].reshape(bshape)
        self._store(spec, lambda: {"gamma": (g * xhat).sum(axis=axes), "beta": g.sum(axis=axes)})
        if not rec["train"]:
            return g * (gamma * inv_std)
        m = rec["count"]
        dxhat = g * gamma
        return (inv_std / m) * (
            m * dxhat
            - dxhat.sum(axis=axes).reshape(bshape)
            - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
        )

    def residual(self, block, g_sum, in_tail):
        main = [c for c in block.children if c.role != ROLE_POST_ADD]
        cut = next((i for i, c in enumerate(main) if c.kind == "ReLU"), None)
        upper = main if cut is None else main[cut + 1:]
        lower = [] if cut is None else main[:cut]

        def through(layers, g):
            for child in reversed(layers):
                g = self.layer(child, g)
            return g

        g_r = through(upper, g_sum)
        if cut is None:
            # branch is linear already (ReLU removed by surgery)
            mask, mode = None, MASKED
        else:
            relu_b = main[cut]
            mask = self.tape.records[relu_b.id]["mask"]
            mode = self.plan.mode(relu_b.id)

        def masked():
            g = g_r if mask is None else relu_backward(g_r, mask, MASKED)
            return through(lower, g)

        g_masked = g_linear = None
        n = g_sum.shape[0]
        alpha = np.ones(n)
        if not in_tail:
            g = g_r if mask is None else relu_backward(g_r, mask, mode)
            g_masked = through(lower, g)
            branch = g_masked
        elif mode is LINEAR:
            g_linear = through(lower, g_r)
            if self.plan.renormalize or self.branch_log is not None:
                g_masked = masked()
            if self.plan.renormalize:
                alpha = _alpha_rows(g_masked, g_linear)
            scale = (self.plan.sgm_lambda * alpha).astype(g_linear.dtype)
            branch = scale.reshape((n,) + (1,) * (g_linear.ndim - 1)) * g_linear
        else:
            g_masked = masked()
            branch = g_sum.dtype.type(self.plan.sgm_lambda) * g_masked
        info = BranchGradients(block.id, g_masked, g_linear, alpha)
        if self.branch_log is not None:
            self.branch_log.append(info)
        return g_sum + branch, info


def _as_batch(tape: ActivationTape, g):
    g = np.asarray(g)
    want = tape.logits.shape if tape.batched else tape.logits.shape[1:]
    if g.shape != want:
        raise ShapeError(f"output gradient shape {g.shape} does not match network output {want}")
    return g if tape.batched else g[None]


def backward(net: Network, tape: ActivationTape, dlogits, plan: BackpropPlan | None = None,
             branch_log: list | None = None):
    """Input gradient of ``net`` given the gradient at its output.

    With the standard plan this is ordinary backpropagation. ``dlogits`` may
    be any gradient shaped like the network output (feature maps for an ``h``
    view). When ``branch_log`` is a list, one :class:`BranchGradients` per
    residual block is appended in backward order.
    """
    plan = plan or STANDARD
    g = _as_batch(tape, dlogits)
    out = _Backward(net, tape, plan, branch_log=branch_log).run(g)
    return out if tape.batched else out[0]


def residual_backward(net: Network, tape: ActivationTape, block_id: int, g_sum, plan: BackpropPlan,
                      in_tail: bool = True):
    """Gradient at a residual block's input given the gradient at its addition node.

    Returns ``(g_out, BranchGradients)``; inputs and outputs carry the batch
    axis of the tape.
    """
    worker = _Backward(net, tape, plan)
    block = net.layer(block_id)
    if block.kind != "ResidualBlock":
        raise ConfigError(f"layer {block_id} is a {block.kind}, not a ResidualBlock")
    return worker.residual(block, np.asarray(g_sum), in_tail)


def gradients(net: Network, tape: ActivationTape, dlogits, frozen_below: int | None = None,
              need_input: bool = False):
    """Standard backprop returning ``(input_grad_or_None, param_grads)``.

    ``param_grads`` maps layer id to a dict of arrays; layers with id below
    ``frozen_below`` are skipped. Gradients are summed over the batch.
    """
    g = _as_batch(tape, dlogits)
    worker = _Backward(net, tape, STANDARD, want_params=True, frozen_below=frozen_below)
    gx = worker.run(g, need_input=need_input)
    grads = {lid: thunk() for lid, thunk in worker.param_grads.items()}
    if gx is not None and not tape.batched:
        gx = gx[0]
    return gx, grads

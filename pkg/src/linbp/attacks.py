"""Gradient-sign attacks under an l-infinity budget.

Every attack takes a source ``net`` plus a :class:`~linbp.engine.BackpropPlan`,
so the same loop runs with ordinary gradients or with LinBP gradients. A
source may also be an ensemble: pass a list of ``(Network, plan)`` pairs as
``net`` and ``None`` as ``plan``; the input gradients are averaged.

Inputs are a single example or a batch; batched attacks treat every row
independently, with its own random stream derived from
``(spec.rng_seed, sample_id)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .engine import STANDARD, backward
from .errors import ConfigError, ShapeError
from .nn import Network, forward, loss_ce, split


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float
    step_size: float = 1.0 / 255
    iterations: int = 100
    targeted: bool = False
    target_class: int | None = None
    random_init: bool = False
    momentum_mu: float = 0.0
    diversity_prob: float = 0.0
    resize_low: int | None = None
    resize_high: int | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.step_size < 0:
            raise ConfigError(f"step_size must be non-negative, got {self.step_size}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be non-negative, got {self.iterations}")
        if self.momentum_mu < 0:
            raise ConfigError(f"momentum_mu must be non-negative, got {self.momentum_mu}")
        if not 0.0 <= self.diversity_prob <= 1.0:
            raise ConfigError(f"diversity_prob must lie in [0, 1], got {self.diversity_prob}")


@dataclass
class AdvResult:
    x_adv: np.ndarray
    achieved_linf: float | np.ndarray
    source_fooled: bool | np.ndarray
    iterations_run: int


def _models(net, plan):
    if isinstance(net, Network):
        return [(net, plan or STANDARD)]
    if plan is not None:
        raise ConfigError("pass plan=None with an ensemble; each member carries its own plan")
    models = [(n, p or STANDARD) for n, p in net]
    if not models:
        raise ConfigError("ensemble is empty")
    shape, classes = models[0][0].input_shape, models[0][0].num_classes
    for n, _ in models:
        if n.input_shape != shape or n.num_classes != classes:
            raise ConfigError("ensemble members disagree on input shape or class count")
    return models


def _batch(models, x, y):
    shape = models[0][0].input_shape
    x = np.asarray(x, dtype=T.FLOAT)
    if x.shape == shape:
        return x[None], np.atleast_1d(np.asarray(y, dtype=np.int64)), False
    if x.shape[1:] != shape:
        raise ShapeError(f"input shape {x.shape} does not match source input {shape}")
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (x.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match batch of {x.shape[0]}")
    return x, y, True


def _loss_grad(models, x, y):
    total = None
    for net, plan in models:
        logits, tape = forward(net, x)
        _, dlogits = loss_ce(logits, y)
        g = backward(net, tape, dlogits, plan)
        total = g if total is None else total + g
    if len(models) > 1:
        total = total / total.dtype.type(len(models))
    return total


def ensemble_grad(nets, x, y):
    """Mean over ``(Network, plan)`` pairs of the cross-entropy input gradient."""
    models = _models(nets, None)
    xb, yb, batched = _batch(models, x, y)
    g = _loss_grad(models, xb, yb)
    return g if batched else g[0]


def step_direction(grad, targeted: bool):
    """Sign step that increases the loss (untargeted) or decreases it toward the target."""
    return T.sign(-grad if targeted else grad)


def _fooled(models, x_adv, y, targeted):
    hit = np.ones(len(y), dtype=bool)
    for net, _ in models:
        logits, _ = forward(net, x_adv)
        pred = logits.argmax(axis=1)
        hit &= (pred == y) if targeted else (pred != y)
    return hit


def _result(models, x0, x_adv, y, targeted, iterations, batched):
    n = x0.shape[0]
    linf = np.abs(x_adv - x0).reshape(n, -1).max(axis=1) if x0.size else np.zeros(n)
    fooled = _fooled(models, x_adv, y, targeted)
    if batched:
        return AdvResult(x_adv, linf.astype(np.float64), fooled, iterations)
    return AdvResult(x_adv[0], float(linf[0]), bool(fooled[0]), iterations)


def fgsm(net, plan, x, y, epsilon, targeted=False) -> AdvResult:
    """One signed-gradient step of size ``epsilon``, clipped to [0, 1].

    With ``targeted`` the label ``y`` is the target and the step descends
    its loss.
    """
    if epsilon < 0:
        raise ConfigError(f"epsilon must be non-negative, got {epsilon}")
    models = _models(net, plan)
    x0, yb, batched = _batch(models, x, y)
    g = _loss_grad(models, x0, yb)
    x_adv = T.clamp(x0 + T.FLOAT(epsilon) * step_direction(g, targeted), 0, 1)
    return _result(models, x0, x_adv, yb, targeted, 1, batched)


# -- input diversity ---------------------------------------------------------

@dataclass(frozen=True)
class DiversityTransform:
    """Nearest-neighbour shrink to ``resized`` pixels, zero-padded back at an offset."""

    size: int
    resized: int
    top: int
    left: int

    @property
    def is_identity(self):
        return self.resized == self.size

    def _index(self):
        src = (np.arange(self.resized) * self.size) // self.resized
        return src[:, None], src[None, :]

    def forward(self, x):
        if self.is_identity:
            return x
        r = self.resized
        rows, cols = self._index()
        out = np.zeros_like(x)
        out[..., self.top:self.top + r, self.left:self.left + r] = x[..., rows, cols]
        return out

    def adjoint(self, g):
        if self.is_identity:
            return g
        r = self.resized
        rows, cols = self._index()
        out = np.zeros_like(g)
        # the source index map is injective when shrinking, so assignment is a scatter-add
        out[..., rows, cols] = g[..., self.top:self.top + r, self.left:self.left + r]
        return out


def diversity_bounds(size, low=None, high=None):
    low = math.ceil(0.9 * size) if low is None else int(low)
    high = size if high is None else int(high)
    if not 1 <= low <= high <= size:
        raise ConfigError(f"resize bounds must satisfy 1 <= low <= high <= {size}, got [{low}, {high}]")
    return low, high


def draw_diversity(size, p, r_low, r_high, rng) -> DiversityTransform:
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"diversity probability must lie in [0, 1], got {p}")
    r_low, r_high = diversity_bounds(size, r_low, r_high)
    if p == 0.0 or rng.random() >= p:
        return DiversityTransform(size, size, 0, 0)
    r = int(rng.integers(r_low, r_high + 1))
    top = int(rng.integers(0, size - r + 1))
    left = int(rng.integers(0, size - r + 1))
    return DiversityTransform(size, r, top, left)


def input_diversity(x, p, r_low, r_high, rng):
    """Randomly shrink-and-pad ``x`` (``(C, S, S)``); returns ``(x_t, transform)``.

    ``transform.adjoint`` maps a gradient at ``x_t`` back to ``x``.
    """
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
        raise ConfigError(f"input diversity needs square images, got {x.shape}")
    t = draw_diversity(x.shape[-1], p, r_low, r_high, rng)
    return t.forward(x), t


# -- iterative attacks -------------------------------------------------------

def _l1_normalize(g):
    n = g.shape[0]
    l1 = np.abs(g).reshape(n, -1).sum(axis=1)
    l1 = np.where(l1 > 0, l1, 1).astype(g.dtype)
    return g / l1.reshape((n,) + (1,) * (g.ndim - 1))


def ifgsm(net, plan, x, y, spec: AttackSpec, sample_ids=None, on_step=None) -> AdvResult:
    """Iterative signed-gradient attack: I-FGSM, PGD, MI-FGSM and DI2-FGSM.

    Each step is ``x <- project(x + step * sign(d))`` where ``d`` is the
    loss gradient, or the l1-normalized momentum accumulator when
    ``spec.momentum_mu > 0``. ``random_init`` starts from a uniform point
    in the eps-ball (PGD); ``diversity_prob > 0`` feeds each forward pass a
    randomly shrunk-and-padded copy of the iterate and maps the gradient
    back through the adjoint. ``on_step(t, x_adv)`` sees every iterate.
    """
    models = _models(net, plan)
    x0, yb, batched = _batch(models, x, y)
    n = x0.shape[0]
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    eps = T.FLOAT(spec.epsilon)
    step = T.FLOAT(spec.step_size)
    x_adv = x0.copy()
    if spec.iterations == 0:
        return _result(models, x0, x_adv, yb, spec.targeted, 0, batched)

    rngs = None
    if spec.random_init or spec.diversity_prob > 0:
        rngs = [T.derive_rng(spec.rng_seed, int(i)) for i in ids]
    if spec.diversity_prob > 0:
        size = x0.shape[-1]
        if x0.ndim != 4 or x0.shape[-2] != size:
            raise ConfigError(f"input diversity needs square images, got {x0.shape[1:]}")
        r_low, r_high = diversity_bounds(size, spec.resize_low, spec.resize_high)
    if spec.random_init:
        noise = np.stack([r.uniform(-spec.epsilon, spec.epsilon, size=x0.shape[1:]) for r in rngs])
        x_adv = T.linf_project(x0 + noise.astype(T.FLOAT), x0, eps)

    acc = np.zeros_like(x0) if spec.momentum_mu > 0 else None
    mu = T.FLOAT(spec.momentum_mu)
    for t in range(spec.iterations):
        if spec.diversity_prob > 0:
            transforms = [draw_diversity(size, spec.diversity_prob, r_low, r_high, r) for r in rngs]
            x_in = np.stack([tr.forward(xi) for tr, xi in zip(transforms, x_adv)])
            g = _loss_grad(models, x_in, yb)
            g = np.stack([tr.adjoint(gi) for tr, gi in zip(transforms, g)])
        else:
            g = _loss_grad(models, x_adv, yb)
        if acc is not None:
            acc = mu * acc + _l1_normalize(-g if spec.targeted else g)
            d = T.sign(acc)
        else:
            d = step_direction(g, spec.targeted)
        x_adv = T.linf_project(x_adv + step * d, x0, eps)
        if on_step is not None:
            on_step(t, x_adv if batched else x_adv[0])
    return _result(models, x0, x_adv, yb, spec.targeted, spec.iterations, batched)


# -- intermediate level attack -----------------------------------------------

def ila_objective(h: Network, x, x_clean, v):
    """``v . (h(x) - h(x_clean))`` per example."""
    fx, _ = forward(h, x)
    fc, _ = forward(h, x_clean)
    diff = (fx - fc) * v
    return diff.reshape(diff.shape[0], -1).sum(axis=1) if np.ndim(x) > len(h.input_shape) else float(diff.sum())


def ila_gradient(h: Network, x, v):
    """Input gradient of the ILA objective: ``(dh/dx)^T v`` (standard backprop)."""
    _, tape = forward(h, x)
    return backward(h, tape, v, STANDARD)


def ila(net: Network, split_k: int, x, y, baseline: AdvResult, spec: AttackSpec,
        on_step=None) -> AdvResult:
    """Refine ``baseline`` by maximizing the feature disturbance along its own direction.

    ``v = h(baseline) - h(x)`` at boundary ``split_k`` is fixed once; the
    attack restarts from ``x`` and takes ``spec.iterations`` signed steps on
    ``v . (h(x + r) - h(x))`` inside the same eps-ball.
    """
    h, _ = split(net, split_k)
    models = [(net, STANDARD)]
    x0, yb, batched = _batch(models, x, y)
    base = np.asarray(baseline.x_adv, dtype=T.FLOAT)
    base = base if batched else base[None]
    if base.shape != x0.shape:
        raise ShapeError(f"baseline shape {base.shape} does not match input {x0.shape}")
    f0, _ = forward(h, x0)
    fb, _ = forward(h, base)
    v = fb - f0
    eps = T.FLOAT(spec.epsilon)
    step = T.FLOAT(spec.step_size)
    x_adv = x0.copy()
    for t in range(spec.iterations):
        g = ila_gradient(h, x_adv, v)
        x_adv = T.linf_project(x_adv + step * T.sign(g), x0, eps)
        if on_step is not None:
            on_step(t, x_adv if batched else x_adv[0])
    return _result(models, x0, x_adv, yb, spec.targeted, spec.iterations, batched)


def run_attack(name, net, plan, x, y, spec: AttackSpec, sample_ids=None) -> AdvResult:
    """Dispatch by name: ``fgsm``, ``ifgsm``, ``pgd``, ``mifgsm`` or ``di2fgsm``.

    The named variants only switch on their defining flag; anything else in
    ``spec`` is honored as given.
    """
    if name == "fgsm":
        return fgsm(net, plan, x, y, spec.epsilon, spec.targeted)
    if name == "ifgsm":
        return ifgsm(net, plan, x, y, spec, sample_ids)
    if name == "pgd":
        return ifgsm(net, plan, x, y, replace(spec, random_init=True), sample_ids)
    if name == "mifgsm":
        mu = spec.momentum_mu or 1.0
        return ifgsm(net, plan, x, y, replace(spec, momentum_mu=mu), sample_ids)
    if name == "di2fgsm":
        mu = spec.momentum_mu or 1.0
        p = spec.diversity_prob or 0.5
        return ifgsm(net, plan, x, y, replace(spec, momentum_mu=mu, diversity_prob=p), sample_ids)
    raise ConfigError(f"unknown attack {name!r}; expected fgsm, ifgsm, pgd, mifgsm or di2fgsm")


ATTACKS = ("fgsm", "ifgsm", "pgd", "mifgsm", "di2fgsm")

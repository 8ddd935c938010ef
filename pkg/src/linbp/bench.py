"""Transfer evaluation harness, experiment configs and reports.

Config files are flat ``key = value`` text, one key per line, ``#`` starts a
comment. Keys are the field names of :class:`ExperimentConfig` (for ``eval``
and ``attack``) or :class:`TrainConfig` (for ``train``). Lists are comma
separated; booleans accept true/false/1/0/yes/no.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import ATTACKS, AttackSpec, ila, run_attack
from .data import Dataset, load_cifar10_bin, make_synthetic
from .engine import BackpropPlan
from .errors import ConfigError, FormatError, ShortfallError
from .lab import TrainSpec, load
from .nn import predict

REPORT_VERSION = 1
CSV_COLUMNS = ("victim_id", "is_source", "n", "fooling_rate", "mean_linf")
EPSILON_GRID = (0.1, 0.05, 0.03)
EPSILON_GRID_255 = (16 / 255, 8 / 255, 4 / 255)


# -- flat config files -------------------------------------------------------

def parse_flat(text, origin="<config>"):
    """``key = value`` lines into a dict of strings; later lines win."""
    out = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{no}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_flat(path):
    path = Path(path)
    try:
        return parse_flat(path.read_text(encoding="utf-8"), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def _to_bool(key, v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {v!r}")


def _to_list(v):
    if isinstance(v, (list, tuple)):
        return tuple(v)
    return tuple(p.strip() for p in str(v).split(",") if p.strip())


def _optional(conv):
    def inner(key, v):
        if v is None or (isinstance(v, str) and v.strip().lower() in ("", "none")):
            return None
        return conv(key, v)
    return inner


def _num(kind):
    def inner(key, v):
        try:
            if kind is float and isinstance(v, str) and "/" in v:
                a, b = v.split("/", 1)
                return float(a) / float(b)
            return kind(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: expected {kind.__name__}, got {v!r}") from exc
    return inner


_CONVERT = {
    "str": lambda k, v: str(v),
    "int": _num(int),
    "float": _num(float),
    "bool": _to_bool,
    "list": lambda k, v: _to_list(v),
    "int?": _optional(_num(int)),
    "float?": _optional(_num(float)),
    "str?": _optional(lambda k, v: str(v)),
    "ints": lambda k, v: tuple(_num(int)(k, p) for p in _to_list(v)),
    "ints?": _optional(lambda k, v: tuple(_num(int)(k, p) for p in _to_list(v))),
}


class _FlatConfig:
    """Mixin: build from string mappings, echo back as plain dicts."""

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, values):
        valid = cls.keys()
        unknown = sorted(set(values) - set(valid))
        if unknown:
            raise ConfigError(f"unknown key(s) {', '.join(unknown)}; valid keys: {', '.join(valid)}")
        kinds = {f.name: f.metadata["kind"] for f in fields(cls)}
        kw = {k: _CONVERT[kinds[k]](k, v) for k, v in values.items()}
        return cls(**kw)

    @classmethod
    def load(cls, path=None, overrides=None):
        values = read_flat(path) if path else {}
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(values)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


def _f(kind, default, doc=""):
    return field(default=default, metadata={"kind": kind, "doc": doc})


@dataclass(frozen=True)
class ExperimentConfig(_FlatConfig):
    source: str = _f("str", "", "source checkpoint")
    victims: tuple = _f("list", (), "victim checkpoints, comma separated")
    attack: str = _f("str", "ifgsm", "fgsm, ifgsm, pgd, mifgsm or di2fgsm")
    epsilon: float = _f("float", 0.03)
    step_size: float = _f("float", 1 / 255)
    iterations: int = _f("int", 100)
    targeted: bool = _f("bool", False)
    random_init: bool = _f("bool", False)
    momentum_mu: float = _f("float", 0.0)
    diversity_prob: float = _f("float", 0.0)
    resize_low: int | None = _f("int?", None)
    resize_high: int | None = _f("int?", None)
    split_k: int | None = _f("int?", None, "LinBP split index; none = standard backprop")
    renormalize: bool = _f("bool", True)
    sgm_lambda: float = _f("float", 1.0)
    ila: bool = _f("bool", False)
    ila_split_k: int | None = _f("int?", None)
    ila_iterations: int = _f("int", 100)
    ila_phase1: str = _f("str", "ifgsm")
    sample_count: int = _f("int", 500)
    filter_correct: bool = _f("bool", True)
    repeats: int = _f("int", 1)
    rng_seed: int = _f("int", 0)
    batch_size: int = _f("int", 100)
    output: str = _f("str", "report.csv")
    format: str = _f("str", "csv", "csv or jsonl")
    timing: bool = _f("bool", False, "write wall-clock seconds into the report")
    data_path: tuple = _f("list", ())
    synth_classes: int = _f("int", 10)
    synth_per_class: int = _f("int", 100)
    synth_seed: int = _f("int", 0)
    synth_size: int = _f("int", 16)
    synth_contrast: float = _f("float", 0.3, "synthetic image contrast around mid-grey")

    def validate(self, need_victims=True):
        """Checks that need no model loading; raises ConfigError naming the key."""
        if not self.source:
            raise ConfigError("source: no checkpoint path given")
        paths = [("source", self.source)] + [("victims", v) for v in self.victims]
        for key, p in paths:
            if not Path(p).is_file():
                raise ConfigError(f"{key}: checkpoint {p} does not exist")
        for p in self.data_path:
            if not Path(p).is_file():
                raise ConfigError(f"data_path: file {p} does not exist")
        if self.attack not in ATTACKS:
            raise ConfigError(f"attack: unknown attack {self.attack!r}; expected one of {', '.join(ATTACKS)}")
        if self.ila and self.ila_phase1 not in ATTACKS:
            raise ConfigError(f"ila_phase1: unknown attack {self.ila_phase1!r}")
        if self.ila and self.ila_split_k is None:
            raise ConfigError("ila_split_k: required when ila is enabled")
        if self.format not in ("csv", "jsonl"):
            raise ConfigError(f"format: expected csv or jsonl, got {self.format!r}")
        if self.sample_count < 1 or self.repeats < 1 or self.batch_size < 1:
            raise ConfigError("sample_count, repeats and batch_size must be positive")
        if self.ila_iterations < 0:
            raise ConfigError("ila_iterations must be non-negative")
        self.attack_spec()
        return self

    def attack_spec(self, repeat=0) -> AttackSpec:
        return AttackSpec(
            epsilon=self.epsilon, step_size=self.step_size, iterations=self.iterations,
            targeted=self.targeted, random_init=self.random_init, momentum_mu=self.momentum_mu,
            diversity_prob=self.diversity_prob, resize_low=self.resize_low,
            resize_high=self.resize_high, rng_seed=repeat_seed(self.rng_seed, repeat),
        )

    def plan(self, net):
        if self.split_k is None:
            return BackpropPlan.standard()
        return BackpropPlan.linbp(net, self.split_k, self.renormalize, self.sgm_lambda)


@dataclass(frozen=True)
class TrainConfig(_FlatConfig):
    arch: str = _f("str", "vgg", "vgg, vgg_wide, resnet or mlp")
    init: str | None = _f("str?", None, "checkpoint to fine-tune instead of a fresh model")
    epochs: int = _f("int", 10)
    batch_size: int = _f("int", 64)
    learning_rate: float = _f("float", 0.05)
    decay_epochs: tuple | None = _f("ints?", None)
    decay_factor: float = _f("float", 0.1)
    weight_decay: float = _f("float", 5e-4)
    momentum: float = _f("float", 0.9)
    freeze_prefix: int | None = _f("int?", None, "layer id; parameters below it stay fixed")
    augment: bool = _f("bool", False)
    rng_seed: int = _f("int", 0)
    output: str = _f("str", "model.lbpf")
    data_path: tuple = _f("list", ())
    test_path: tuple = _f("list", ())
    synth_classes: int = _f("int", 10)
    synth_per_class: int = _f("int", 200)
    synth_seed: int = _f("int", 0)
    synth_size: int = _f("int", 16)
    synth_contrast: float = _f("float", 0.3, "synthetic image contrast around mid-grey")

    def train_spec(self):
        return TrainSpec(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            decay_epochs=self.decay_epochs, decay_factor=self.decay_factor,
            weight_decay=self.weight_decay, momentum=self.momentum,
            freeze_prefix=self.freeze_prefix, augment=self.augment, rng_seed=self.rng_seed,
        )


def repeat_seed(seed, repeat):
    """Attack seed for one repeat; repeat 0 keeps the run seed."""
    if repeat == 0:
        return int(seed)
    return int(np.random.SeedSequence([int(seed), int(repeat)]).generate_state(1, np.uint64)[0] >> 1)


def load_dataset(cfg, split="test", paths=None) -> Dataset:
    paths = cfg.data_path if paths is None else paths
    if paths:
        return load_cifar10_bin(paths, split)
    size = cfg.synth_size
    return make_synthetic(cfg.synth_classes, cfg.synth_per_class, (3, size, size), cfg.synth_seed, split,
                          contrast=cfg.synth_contrast)


# -- reports -----------------------------------------------------------------

@dataclass
class VictimResult:
    victim_id: str
    is_source: bool
    n: int
    fooled: int
    fooling_rate: float
    mean_linf: float


@dataclass
class EvalReport:
    config: dict
    victims: list
    format_version: int = REPORT_VERSION
    wall_clock: float | None = None

    def row(self, victim_id):
        for v in self.victims:
            if v.victim_id == victim_id:
                return v
        raise KeyError(victim_id)

    @property
    def source(self):
        return next(v for v in self.victims if v.is_source)

    def transfer_rates(self):
        return {v.victim_id: v.fooling_rate for v in self.victims if not v.is_source}


def emit_report(report: EvalReport, path, fmt="csv"):
    """Write ``report`` as csv (fixed columns) or json-lines (header line + one line per victim)."""
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            if fmt == "csv":
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_COLUMNS)
                for v in report.victims:
                    w.writerow([v.victim_id, "true" if v.is_source else "false", v.n,
                                f"{v.fooling_rate:.4f}", f"{v.mean_linf:.6f}"])
            elif fmt == "jsonl":
                head = {"type": "report", "format_version": report.format_version, "config": report.config}
                if report.wall_clock is not None:
                    head["wall_clock"] = report.wall_clock
                fh.write(json.dumps(head, sort_keys=True) + "\n")
                for v in report.victims:
                    fh.write(json.dumps({"type": "victim", **asdict(v)}, sort_keys=True) + "\n")
            else:
                raise ConfigError(f"format: expected csv or jsonl, got {fmt!r}")
    except OSError as exc:
        raise FormatError(f"cannot write report {path}: {exc}") from exc


def read_report_jsonl(path) -> EvalReport:
    path = Path(path)
    try:
        lines = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read report {path}: {exc}") from exc
    if not lines or lines[0].get("type") != "report":
        raise FormatError(f"{path}: first line is not a report header")
    head = lines[0]
    victims = []
    for d in lines[1:]:
        d = dict(d)
        d.pop("type", None)
        victims.append(VictimResult(**d))
    return EvalReport(head["config"], victims, head["format_version"], head.get("wall_clock"))


# -- evaluation --------------------------------------------------------------

def load_models(cfg: ExperimentConfig):
    """Load every checkpoint before any work starts; shapes must agree."""
    source = load(cfg.source)
    victims = [load(p) for p in cfg.victims]
    for p, v in zip(cfg.victims, victims):
        if v.input_shape != source.input_shape or v.num_classes != source.num_classes:
            raise ConfigError(f"victims: {p} has input {v.input_shape}/{v.num_classes} classes, "
                              f"source has {source.input_shape}/{source.num_classes}")
    return source, victims


def select_samples(dataset, models, count, filter_correct, seed):
    """Indices of ``count`` samples in a seeded random order, optionally
    restricted to those every model classifies correctly."""
    order = T.make_rng(seed).permutation(len(dataset))
    if filter_correct:
        ok = np.ones(len(dataset), dtype=bool)
        for net in models:
            ok &= predict(net, dataset.images) == dataset.labels
        order = order[ok[order]]
    if len(order) < count:
        raise ShortfallError(f"only {len(order)} eligible samples, sample_count is {count}", len(order))
    return order[:count]


def draw_targets(labels, sample_ids, num_classes, seed):
    """One target per sample, uniform over the wrong classes, keyed by sample id."""
    out = np.empty(len(labels), dtype=np.int64)
    for i, (y, sid) in enumerate(zip(labels, sample_ids)):
        shift = T.derive_rng(seed, int(sid)).integers(1, num_classes)
        out[i] = (int(y) + int(shift)) % num_classes
    return out


def craft(cfg: ExperimentConfig, source, x, y, sample_ids, repeat=0):
    """Adversarial examples on ``source`` for one batch under ``cfg``."""
    spec = cfg.attack_spec(repeat)
    plan = cfg.plan(source)
    if not cfg.ila:
        return run_attack(cfg.attack, source, plan, x, y, spec, sample_ids)
    base = run_attack(cfg.ila_phase1, source, plan, x, y, spec, sample_ids)
    return ila(source, cfg.ila_split_k, x, y, base, replace(spec, iterations=cfg.ila_iterations))


def eval_transfer(cfg: ExperimentConfig, dataset: Dataset | None = None) -> EvalReport:
    """Craft on the source, score every model (source first, flagged white-box)."""
    start = time.perf_counter()
    cfg.validate()
    source, victims = load_models(cfg)
    if dataset is None:
        dataset = load_dataset(cfg, "test")
    if dataset.shape != source.input_shape:
        raise ConfigError(f"dataset images {dataset.shape} do not match model input {source.input_shape}")
    models = [source] + victims
    ids = select_samples(dataset, models, cfg.sample_count, cfg.filter_correct, cfg.rng_seed)
    x_all = dataset.images[ids]
    y_all = dataset.labels[ids]
    goal = draw_targets(y_all, ids, source.num_classes, cfg.rng_seed) if cfg.targeted else y_all
    fooled = np.zeros(len(models), dtype=np.int64)
    linf_sum = 0.0
    total = 0
    for r in range(cfg.repeats):
        for s in range(0, len(ids), cfg.batch_size):
            sl = slice(s, s + cfg.batch_size)
            res = craft(cfg, source, x_all[sl], goal[sl], ids[sl], r)
            linf_sum += float(np.sum(res.achieved_linf))
            total += len(ids[sl])
            for m, net in enumerate(models):
                pred = predict(net, res.x_adv)
                hit = pred == goal[sl] if cfg.targeted else pred != goal[sl]
                fooled[m] += int(hit.sum())
    mean_linf = linf_sum / total
    names = [cfg.source] + list(cfg.victims)
    rows = [VictimResult(name, m == 0, total, int(fooled[m]), float(fooled[m]) / total, mean_linf)
            for m, name in enumerate(names)]
    wall = time.perf_counter() - start
    return EvalReport(cfg.to_dict(), rows, REPORT_VERSION, wall if cfg.timing else None)


def check_report_arithmetic(report: EvalReport):
    for v in report.victims:
        if not 0.0 <= v.fooling_rate <= 1.0 or round(v.fooling_rate * v.n) != v.fooled:
            return False
    return True


__all__ = [
    "CSV_COLUMNS", "EPSILON_GRID", "EPSILON_GRID_255", "EvalReport", "ExperimentConfig",
    "TrainConfig", "VictimResult", "check_report_arithmetic", "craft", "draw_targets",
    "emit_report", "eval_transfer", "load_dataset", "load_models", "parse_flat", "read_flat",
    "read_report_jsonl", "select_samples",
]

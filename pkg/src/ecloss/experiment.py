"""Run configuration and the train / evaluate pipeline shared by the CLI and tests."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import metrics, nn, synthdata, templates
from .errors import DomainError
from .loss import LossConfig, mutual_information
from .parallel import blas_limit

__all__ = ["RunConfig", "parse_config", "load_config", "Prepared", "prepare", "TrainResult",
           "initial_params", "train_model", "features_of", "evaluate_model", "spearman"]


@dataclass(frozen=True)
class RunConfig:
    # data
    n_identities: int = 10
    samples_per_identity: int = 200
    image_size: int = 56
    jitter: float = 0.05
    noise_std: float = 0.05
    data_seed: int = 0
    train_fraction: float = 0.8
    # network
    channels: int = 16
    init: str = "glorot"
    # templates
    tau: float = 0.001
    radius: float = 4.0
    template_count: int = 400
    template_seed: int = 0
    # loss
    alpha: float = 1.0
    beta: float = 1e-5
    beta_schedule: str = "fixed"
    beta_window: int = 50
    ecloss: str = "on"
    # trainer
    lr: float = 0.03
    batch_size: int = 64
    epochs: int = 10
    seed: int = 1
    # metrics
    prominence_min: str = "auto"
    ls_formula: str = "squared"
    eval_images: int = 0
    # output
    out_dir: str = "out"

    def __post_init__(self):
        if self.ecloss not in ("on", "off"):
            raise DomainError("ecloss must be 'on' or 'off'")
        if self.init not in ("glorot", "zero"):
            raise DomainError("init must be 'glorot' or 'zero'")
        if self.ls_formula not in ("squared", "literal"):
            raise DomainError("ls_formula must be 'squared' or 'literal'")
        if self.prominence_min != "auto":
            try:
                if float(self.prominence_min) < 0:
                    raise ValueError
            except ValueError:
                raise DomainError("prominence_min must be 'auto' or a non-negative number") from None
        for name in ("channels", "template_count", "batch_size", "image_size"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1")
        if self.epochs < 0 or self.eval_images < 0:
            raise DomainError("epochs and eval_images must be >= 0")
        if self.image_size % 4:
            raise DomainError("image_size must be a multiple of 4 for the reference network")
        if not self.lr > 0:
            raise DomainError("lr must be > 0")

    def with_overrides(self, pairs):
        return parse_config(pairs, base=self)

    def dataset_spec(self):
        return synthdata.DatasetSpec(
            n_identities=self.n_identities,
            samples_per_identity=self.samples_per_identity,
            image_size=self.image_size,
            jitter_radius=self.jitter,
            noise_std=self.noise_std,
            seed=self.data_seed,
        )

    def network_spec(self):
        return nn.reference_spec(self.channels, self.n_identities, self.image_size)

    def loss_config(self):
        beta = self.beta if self.ecloss == "on" else 0.0
        return LossConfig(alpha=self.alpha, beta=beta, beta_schedule=self.beta_schedule,
                          beta_window=self.beta_window)

    def template_set(self):
        g = self.image_size // 4
        return templates.default_set(g, g, self.tau, self.radius, self.template_count, self.template_seed)

    def prominence(self):
        return None if self.prominence_min == "auto" else float(self.prominence_min)

    def dumps(self):
        """Fully resolved ``key = value`` text, one line per field."""
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


_FIELDS = {f.name: f for f in fields(RunConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def _cast(name, raw):
    kind = _FIELDS[name].type
    try:
        if kind == "int":
            value = float(raw)
            if value != int(value):
                raise ValueError
            return int(value)
        return _CASTS[kind](raw)
    except ValueError:
        raise DomainError(f"{name}: cannot read {raw!r} as {kind}") from None


def parse_config(pairs, base=None):
    """Apply ``(key, value)`` string pairs to ``base``; unknown keys are rejected."""
    values = {}
    for key, raw in pairs:
        key = key.strip().replace("-", "_")
        if key not in _FIELDS:
            raise DomainError(f"unknown config key {key!r}")
        values[key] = _cast(key, str(raw).strip())
    return replace(base or RunConfig(), **values)


def read_pairs(text):
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DomainError(f"config line {n}: expected key = value")
        key, _, value = line.partition("=")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path, base=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(read_pairs(fh.read()), base)


@dataclass
class Prepared:
    """Train/eval arrays and everything derived from the config."""

    config: RunConfig
    spec: nn.NetworkSpec
    tset: templates.TemplateSet
    train: tuple      # (images, labels, masks)
    eval: tuple
    part_names: tuple


def prepare(config: RunConfig, samples=None, part_names=None) -> Prepared:
    """Generate (or take) the dataset and split it."""
    if samples is None:
        samples = synthdata.generate(config.dataset_spec())
        part_names = tuple(p.name for p in synthdata.DEFAULT_PARTS)
    train, held_out = synthdata.split(samples, config.train_fraction, seed=config.data_seed)
    if config.eval_images:
        held_out = held_out[:config.eval_images]
    spec = config.network_spec()
    if samples[0].image.shape != spec.input_shape:
        raise DomainError(f"dataset images {samples[0].image.shape} do not fit network {spec.input_shape}")
    return Prepared(
        config=config,
        spec=spec,
        tset=config.template_set(),
        train=synthdata.to_arrays(train),
        eval=synthdata.to_arrays(held_out),
        part_names=tuple(part_names),
    )


@dataclass
class TrainResult:
    params: np.ndarray
    log: list
    train_accuracy: float
    eval_mi_initial: float
    eval_mi_final: float


def _eval_mi(prep, params, limit=128):
    _, feats = nn.forward(prep.spec, params, prep.eval[0][:limit])
    return mutual_information(feats, prep.tset).mi


def initial_params(spec, cfg):
    if cfg.init == "zero":
        return np.zeros(spec.n_params)
    return nn.init_params(spec, cfg.seed)


def train_model(prep: Prepared) -> TrainResult:
    cfg = prep.config
    with blas_limit():
        params0 = initial_params(prep.spec, cfg)
        state = nn.TrainerState(
            parameters=params0,
            learning_rate=cfg.lr,
            batch_size=cfg.batch_size,
            rng_seed=cfg.seed,
            loss_config=cfg.loss_config(),
        )
        mi0 = _eval_mi(prep, params0)
        state, log = nn.train(prep.spec, prep.train[:2], state, cfg.epochs, prep.tset)
        acc = nn.accuracy(prep.spec, state.parameters, *prep.train[:2])
        mi1 = _eval_mi(prep, state.parameters)
    return TrainResult(state.parameters, log, acc, mi0, mi1)


def features_of(spec, params, images, batch_size=256):
    out = []
    with blas_limit():
        for s in range(0, len(images), batch_size):
            out.append(nn.forward(spec, params, images[s:s + batch_size])[1])
    return np.concatenate(out)


def evaluate_model(prep: Prepared, params) -> metrics.MetricsReport:
    cfg = prep.config
    feats = features_of(prep.spec, params, prep.eval[0])
    with blas_limit():
        report = metrics.evaluate(feats, prep.eval[2], cfg.prominence(), literal_ls=cfg.ls_formula == "literal")
        predicted = nn.predict(prep.spec, params, prep.eval[0])
    report.extra["eval_accuracy"] = float(np.mean(predicted == prep.eval[1]))
    return report


def spearman(a, b):
    """Spearman rank correlation (average ranks on ties)."""
    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(len(v), dtype=np.float64)
        for value in np.unique(v):
            tie = v == value
            if tie.sum() > 1:
                r[tie] = r[tie].mean()
        return r

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float((ra ** 2).sum() * (rb ** 2).sum()))
    return float((ra * rb).sum() / denom) if denom else 0.0

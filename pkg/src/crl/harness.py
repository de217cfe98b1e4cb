"""Experiment configuration, the seeded training loop, evaluation and run comparison."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import baselines, checkpoint, losses, metrics, mining
from .datagen import (AttributeSchema, Dataset, generate_synthetic, imbalance_prior, load_dataset,
                      make_generator_spec, split)
from .errors import ConfigError, ContractError, TrainingDiverged
from .network import ModelConfig, OptimState, forward, init_params, predict, sgd_step, backward

log = logging.getLogger(__name__)

LOSS_NAMES = {"ce": "none", "none": "none", "crl-r": "relative", "crl-a": "absolute", "crl-d": "distribution"}
BASELINES = ("none", "oversample", "downsample", "cost-sensitive")


# --- configuration --------------------------------------------------------------

@dataclass
class DataConfig:
    path: str = ""  # a .crld file; when set the generator fields are ignored
    test_path: str = ""
    cardinalities: list = field(default_factory=lambda: [2, 2, 2, 2])
    ratios: list = field(default_factory=lambda: [1, 10, 50, 200])
    feature_dim: int = 32
    prototype_scale: float = 2.5
    noise_sigma: float = 1.0
    n_train: int = 20000
    n_test: int = 4000
    seed: int = 0


@dataclass
class ModelSection:
    trunk_layer_sizes: list = field(default_factory=lambda: [128])
    branch_dim: int = 64
    normalize_features: bool = True


@dataclass
class OptimConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 30
    seeds: list = field(default_factory=lambda: [0])
    dump_mining: str = ""


@dataclass
class LossConfig:
    name: str = "crl-r"  # ce | crl-r | crl-a | crl-d
    mining: str = "instance"
    k: int = 5
    m_apc: float = 1.0
    hist_bins: int = 51
    hist_low: float = 0.0
    hist_high: float = 2.0
    weight: float = 1.0


@dataclass
class BaselineConfig:
    mode: str = "none"
    ref_attr: int = -1  # -1: the most imbalanced attribute of the training set


@dataclass
class ExperimentConfig:
    name: str = ""
    output_dir: str = "runs/experiment"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def validate(self) -> "ExperimentConfig":
        if self.train.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.train.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.train.seeds:
            raise ConfigError("need at least one seed")
        if self.loss.name not in LOSS_NAMES:
            raise ConfigError(f"unknown loss {self.loss.name!r}; expected one of ce, crl-r, crl-a, crl-d")
        if self.loss.mining not in (mining.CLASS_LEVEL, mining.INSTANCE_LEVEL):
            raise ConfigError(f"unknown mining mode {self.loss.mining!r}")
        if self.loss.k < 1:
            raise ConfigError("k must be >= 1")
        if self.loss.m_apc <= 0:
            raise ConfigError("m_apc must be > 0")
        losses.HistogramSpec(self.loss.hist_bins, self.loss.hist_low, self.loss.hist_high)
        if self.baseline.mode not in BASELINES:
            raise ConfigError(f"unknown baseline {self.baseline.mode!r}")
        d = self.data
        if not d.path:
            if len(d.cardinalities) != len(d.ratios):
                raise ConfigError("data.cardinalities and data.ratios must have equal length")
            AttributeSchema(tuple(d.cardinalities))
            if d.n_train < 1 or d.n_test < 1:
                raise ConfigError("n_train and n_test must be >= 1")
            n_attr = len(d.cardinalities)
            if not -1 <= self.baseline.ref_attr < n_attr:
                raise ConfigError(f"baseline.ref_attr {self.baseline.ref_attr} out of range")
        ModelConfig(feature_dim=max(d.feature_dim, 1), schema=AttributeSchema((2,)),
                    trunk_layer_sizes=tuple(self.model.trunk_layer_sizes), branch_dim=self.model.branch_dim)
        return self

    @property
    def crl_variant(self) -> str:
        return LOSS_NAMES[self.loss.name]

    @property
    def method(self) -> str:
        """Short label used in reports, e.g. ``ce``, ``crl-i-r``, ``downsample``."""
        parts = []
        if self.baseline.mode != "none":
            parts.append(self.baseline.mode)
        if self.crl_variant != "none":
            parts.append(f"crl-{self.loss.mining[0]}-{self.crl_variant[0]}")
        return self.name or ("+".join(parts) if parts else "ce")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Stable across platforms: sorted-key JSON of everything except output location and seeds."""
        d = self.to_dict()
        d.pop("output_dir")
        d["train"] = {k: v for k, v in d["train"].items() if k not in ("seeds", "dump_mining")}
        d["loss"]["name"] = {"none": "ce"}.get(d["loss"]["name"], d["loss"]["name"])
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _section(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {sorted(unknown)}")
    return cls(**values)


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    sections = {"data": DataConfig, "model": ModelSection, "optim": OptimConfig, "train": TrainConfig,
                "loss": LossConfig, "baseline": BaselineConfig}
    kwargs = {}
    for key, cls in sections.items():
        kwargs[key] = _section(cls, d.pop(key, {}), key)
    cfg = _section(ExperimentConfig, d, "top level")
    return replace(cfg, **kwargs).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    import tomli_w
    return tomli_w.dumps(cfg.to_dict())


# --- data -----------------------------------------------------------------------

def build_data(cfg: DataConfig) -> tuple[Dataset, Dataset]:
    """Train/test datasets: loaded from disk, or generated and split 20k/4k-style."""
    if cfg.path:
        ds = load_dataset(cfg.path)
        if cfg.test_path:
            return ds, load_dataset(cfg.test_path)
        n = ds.n
        n_test = min(cfg.n_test, n - 1)
        train, test = split(ds, [(n - n_test) / n, n_test / n], seed=cfg.seed)
        return train, test
    schema = AttributeSchema(tuple(cfg.cardinalities))
    priors = [imbalance_prior(r, c) for r, c in zip(cfg.ratios, cfg.cardinalities)]
    n = cfg.n_train + cfg.n_test
    spec = make_generator_spec(schema, priors, cfg.feature_dim, cfg.prototype_scale, cfg.noise_sigma, n, cfg.seed)
    ds = generate_synthetic(spec)
    train, test = split(ds, [cfg.n_train / n, cfg.n_test / n], seed=cfg.seed + 1)
    return train, test


# --- evaluation -----------------------------------------------------------------

def predict_chunked(params, features, chunk: int = 2048) -> np.ndarray:
    """Predict in chunks; ``CRL_THREADS`` (default 1) caps the worker count."""
    threads = max(1, int(os.environ.get("CRL_THREADS", "1")))
    starts = range(0, len(features), chunk)
    if threads == 1:
        parts = [predict(params, features[s:s + chunk]) for s in starts]
    else:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda s: predict(params, features[s:s + chunk]), starts))
    return np.concatenate(parts)


def evaluate_model(params, test: Dataset, train_counts=None) -> metrics.EvalReport:
    preds = predict_chunked(params, test.features)
    return metrics.evaluate(preds, test.labels, test.schema, train_counts)


# --- training -------------------------------------------------------------------

@dataclass
class RunRecord:
    method: str
    seed: int
    config_hash: str
    epochs: list  # dicts: epoch, l_ce, l_crl, l_bln, val_mean_sensitivity
    final: dict  # EvalReport JSON
    checkpoint: str
    params_sha256: str
    wall_clock_seconds: float = 0.0

    def to_json(self, include_wall_clock: bool = True) -> str:
        d = asdict(self)
        if not include_wall_clock:
            d.pop("wall_clock_seconds")
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))

    @property
    def report(self) -> metrics.EvalReport:
        return metrics.EvalReport.from_json(self.final)


def _epoch_rng(seed: int, epoch: int):
    return np.random.default_rng([seed, epoch, 0xBA7C])


def _batches(order: np.ndarray, batch_size: int):
    for s in range(0, len(order), batch_size):
        b = order[s:s + batch_size]
        if len(b) >= 2:  # a trailing singleton cannot be profiled meaningfully
            yield b


def _dump_diverged(out: Path, x, y, epoch, step):
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"diverged_epoch{epoch}_step{step}.npz"
    np.savez(path, features=x, labels=y)
    return path


def train_one(cfg: ExperimentConfig, seed: int, train: Dataset, test: Dataset, run_dir: Path,
              resume: str | None = None) -> RunRecord:
    t0 = time.perf_counter()
    schema = train.schema
    model_cfg = ModelConfig(
        feature_dim=train.feature_dim,
        schema=schema,
        trunk_layer_sizes=tuple(cfg.model.trunk_layer_sizes),
        branch_dim=cfg.model.branch_dim,
        normalize_features=cfg.model.normalize_features,
        init_seed=seed,
    )
    history, start = [], 0
    if resume:
        params, state, meta = checkpoint.load_checkpoint(resume)
        if params.config != model_cfg:
            raise ContractError(f"checkpoint {resume} was written for a different model configuration")
        if state is None:
            state = OptimState.zeros_like(params, **asdict(cfg.optim))
        history = meta.get("history", [])
        start = int(meta.get("epochs_done", 0))
    else:
        params = init_params(model_cfg)
        state = OptimState.zeros_like(params, **asdict(cfg.optim))

    variant = cfg.crl_variant
    margins = losses.MarginSpec.for_schema(schema, cfg.loss.m_apc)
    hist = losses.HistogramSpec(cfg.loss.hist_bins, cfg.loss.hist_low, cfg.loss.hist_high)
    ref_attr = None if cfg.baseline.ref_attr < 0 else cfg.baseline.ref_attr
    class_weights = None
    if cfg.baseline.mode in ("oversample", "downsample"):
        # resampled subset fixed once per run; only its order changes between epochs
        base = baselines.make_sampler(train, cfg.baseline.mode, ref_attr, seed).indices
    else:
        base = np.arange(train.n)
        if cfg.baseline.mode == "cost-sensitive":
            class_weights = baselines.cost_weights(train).weights
    train_counts = [train.class_counts(j) for j in range(schema.n_attr)]
    dump_dir = Path(cfg.train.dump_mining) if cfg.train.dump_mining else None
    if dump_dir:
        dump_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(start, cfg.train.epochs):
        order = base[_epoch_rng(seed, epoch).permutation(len(base))]
        sums = np.zeros(3)
        n_batches = 0
        for step, idx in enumerate(_batches(order, cfg.train.batch_size)):
            x, y = train.features[idx], train.labels[idx]
            cache = forward(params, x)
            bundle = losses.combined_loss(
                cache, y, schema, variant, cfg.loss.mining, cfg.loss.k, margins, hist,
                crl_weight=cfg.loss.weight, class_weights=class_weights,
            )
            diag = bundle.diagnostics
            if not np.isfinite(bundle.value):
                where = _dump_diverged(run_dir, x, y, epoch, step)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}; batch dumped to {where}")
            if dump_dir and variant != "none":
                _dump_mining(dump_dir, seed, epoch, step, diag)
            grads = backward(params, cache, bundle.grad_logits, bundle.grad_features)
            sgd_step(params, grads, state)
            sums += (diag["ce"], diag["crl"], diag["bln"])
            n_batches += 1
        l_ce, l_crl, l_bln = (sums / max(n_batches, 1)).tolist()
        val = evaluate_model(params, test, train_counts)
        history.append({"epoch": epoch, "l_ce": l_ce, "l_crl": l_crl, "l_bln": l_bln,
                        "val_mean_sensitivity": val.mean_sensitivity})
        log.info("%s seed=%d epoch=%d l_ce=%.4f l_crl=%.4f val=%.2f",
                 cfg.method, seed, epoch, l_ce, l_crl, val.mean_sensitivity)

    report = evaluate_model(params, test, train_counts)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run_dir / "checkpoint.crlc"
    digest = checkpoint.save_checkpoint(
        ckpt, params, state, meta={"epochs_done": cfg.train.epochs, "history": history,
                                   "config_hash": cfg.hash(), "seed": seed})
    record = RunRecord(
        method=cfg.method,
        seed=seed,
        config_hash=cfg.hash(),
        epochs=history,
        final=report.to_json(),
        checkpoint=ckpt.name,
        params_sha256=digest,
        wall_clock_seconds=time.perf_counter() - t0,
    )
    (run_dir / "record.json").write_text(record.to_json())
    return record


def _dump_mining(out: Path, seed, epoch, step, diag):
    payload = {
        "seed": seed, "epoch": epoch, "step": step,
        "profile": diag["profile"].to_json(),
        "hard_sets": diag["hard"].to_json(),
        "n_anchors": diag["n_anchors"],
        "n_triplets": diag.get("n_triplets"),
        "n_pos": diag.get("n_pos"),
        "n_neg": diag.get("n_neg"),
    }
    (out / f"seed{seed}_epoch{epoch:03d}_step{step:05d}.json").write_text(json.dumps(payload))


def run_dir_for(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.output_dir) / cfg.method / f"seed{seed}"


def run_experiment(cfg: ExperimentConfig, seeds=None, resume: str | None = None) -> list[RunRecord]:
    cfg.validate()
    train, test = build_data(cfg.data)
    if cfg.baseline.ref_attr >= train.schema.n_attr:
        raise ConfigError(f"baseline.ref_attr {cfg.baseline.ref_attr} out of range")
    seeds = list(cfg.train.seeds if seeds is None else seeds)
    return [train_one(cfg, s, train, test, run_dir_for(cfg, s), resume=resume) for s in seeds]


# --- comparison -----------------------------------------------------------------

@dataclass
class Comparison:
    rows: list  # GainRow with median-over-seeds gains
    per_seed: dict  # method -> list of per-seed EvalReports
    baseline: str

    def tsv(self) -> str:
        return metrics.gain_tsv(self.rows)

    def text(self) -> str:
        return metrics.gain_text(self.rows)

    def gain(self, method: str, attr: int) -> float:
        for r in self.rows:
            if r.method == method and r.attr == attr:
                return r.gain
        raise KeyError((method, attr))

    def average_gain(self, method: str) -> float:
        return float(np.mean([r.gain for r in self.rows if r.method == method]))


def _median_report(reports: list) -> metrics.EvalReport:
    """Per-attribute median mean sensitivity over seeds, on a copy of the first report."""
    first = reports[0]
    attrs = []
    for j, a in enumerate(first.attributes):
        med = float(np.median([r.attributes[j].mean_sensitivity for r in reports]))
        attrs.append(replace(a, mean_sensitivity=med))
    overall = float(np.mean([a.mean_sensitivity for a in attrs]))
    return metrics.EvalReport(attrs, overall, first.n_samples, first.test_fingerprint)


def compare(records, baseline: str = "ce") -> Comparison:
    """Gain of every method over ``baseline``: median over seeds of each method's score."""
    by_method: dict = {}
    for rec in records:
        by_method.setdefault(rec.method, []).append(rec)
    if baseline not in by_method:
        raise ContractError(f"no records for baseline method {baseline!r}")
    fps = {rec.final["test_fingerprint"] for rec in records}
    if len(fps) != 1:
        raise ContractError("records were evaluated on different test sets")
    per_seed = {m: [r.report for r in sorted(rs, key=lambda r: r.seed)] for m, rs in by_method.items()}
    base = _median_report(per_seed[baseline])
    candidates = {m: _median_report(reps) for m, reps in per_seed.items() if m != baseline}
    if not candidates:
        candidates = {baseline: base}
    return Comparison(metrics.gain_table(base, candidates), per_seed, baseline)


def write_comparison(comp: Comparison, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gains.tsv").write_text(comp.tsv())
    (out / "gains.txt").write_text(comp.text() + "\n")

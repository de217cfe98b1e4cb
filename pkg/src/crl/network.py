"""Multi-branch dense classifier with hand-written forward/backward and momentum SGD.

Layout: shared ReLU trunk -> one ReLU feature branch per attribute (``branch_dim`` wide)
-> one linear softmax head per attribute. The branch outputs are the per-attribute
features that mining and the rectification losses operate on; by default they are
L2-normalised first, and that normalisation is part of the differentiable graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import AttributeSchema
from .errors import ConfigError, ContractError, NumericInputError

NORM_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    schema: AttributeSchema
    trunk_layer_sizes: tuple[int, ...] = (128,)
    branch_dim: int = 64
    activation: str = "relu"
    normalize_features: bool = True
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "trunk_layer_sizes", tuple(int(w) for w in self.trunk_layer_sizes))
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if not self.trunk_layer_sizes:
            raise ConfigError("trunk_layer_sizes must be non-empty")
        if any(w < 1 for w in self.trunk_layer_sizes):
            raise ConfigError(f"trunk widths must be >= 1, got {self.trunk_layer_sizes}")
        if self.branch_dim < 1:
            raise ConfigError("branch_dim must be >= 1")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "cardinalities": list(self.schema.cardinalities),
            "trunk_layer_sizes": list(self.trunk_layer_sizes),
            "branch_dim": self.branch_dim,
            "activation": self.activation,
            "normalize_features": self.normalize_features,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        schema = AttributeSchema(tuple(d.pop("cardinalities")))
        return cls(schema=schema, **d)


@dataclass
class Parameters:
    """Named float64 tensors. Weight matrices are stored ``(out, in)``."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def copy(self) -> "Parameters":
        return Parameters(self.config, {k: v.copy() for k, v in self.tensors.items()})


def param_names(config: ModelConfig) -> list[str]:
    names = []
    for l in range(len(config.trunk_layer_sizes)):
        names += [f"trunk.{l}.W", f"trunk.{l}.b"]
    for j in range(config.schema.n_attr):
        names += [f"branch.{j}.W", f"branch.{j}.b", f"head.{j}.W", f"head.{j}.b"]
    return names


def init_params(config: ModelConfig) -> Parameters:
    """Fan-in scaled uniform weights (He-style gain for ReLU layers), zero biases."""
    rng = np.random.default_rng(config.init_seed)
    tensors = {}

    def uniform(fan_out, fan_in, gain):
        limit = gain * np.sqrt(3.0 / fan_in)
        return rng.uniform(-limit, limit, size=(fan_out, fan_in))

    width_in = config.feature_dim
    for l, width in enumerate(config.trunk_layer_sizes):
        tensors[f"trunk.{l}.W"] = uniform(width, width_in, np.sqrt(2.0))
        tensors[f"trunk.{l}.b"] = np.zeros(width)
        width_in = width
    for j, card in enumerate(config.schema.cardinalities):
        tensors[f"branch.{j}.W"] = uniform(config.branch_dim, width_in, np.sqrt(2.0))
        tensors[f"branch.{j}.b"] = np.zeros(config.branch_dim)
        tensors[f"head.{j}.W"] = uniform(card, config.branch_dim, 1.0)
        tensors[f"head.{j}.b"] = np.zeros(card)
    return Parameters(config, tensors)


@dataclass
class ForwardCache:
    """Everything one batch's forward pass produced; lists are indexed by attribute."""

    inputs: np.ndarray
    trunk_pre: list = field(default_factory=list)
    trunk_out: list = field(default_factory=list)
    branch_pre: list = field(default_factory=list)
    features: list = field(default_factory=list)  # x_{i,j}, post-ReLU
    norms: list = field(default_factory=list)
    embeddings: list = field(default_factory=list)  # what distances are measured on
    logits: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    probs: list = field(default_factory=list)
    normalized: bool = True

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_attr(self) -> int:
        return len(self.probs)

    def predictions(self, j: int) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. the lowest class index on ties
        return np.argmax(self.probs[j], axis=1)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward(params: Parameters, batch_features) -> ForwardCache:
    cfg = params.config
    x = np.asarray(batch_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractError(f"batch must be a non-empty (n, d) array, got shape {x.shape}")
    if x.shape[1] != cfg.feature_dim:
        raise ContractError(f"feature dimension {x.shape[1]} != model feature_dim {cfg.feature_dim}")
    if not np.isfinite(x).all():
        raise NumericInputError("batch features contain non-finite values")

    t = params.tensors
    cache = ForwardCache(inputs=x, normalized=cfg.normalize_features)
    h = x
    for l in range(len(cfg.trunk_layer_sizes)):
        z = h @ t[f"trunk.{l}.W"].T + t[f"trunk.{l}.b"]
        h = np.maximum(z, 0.0)
        cache.trunk_pre.append(z)
        cache.trunk_out.append(h)
    for j in range(cfg.schema.n_attr):
        z = h @ t[f"branch.{j}.W"].T + t[f"branch.{j}.b"]
        f = np.maximum(z, 0.0)
        logits = f @ t[f"head.{j}.W"].T + t[f"head.{j}.b"]
        logp = log_softmax(logits)
        cache.branch_pre.append(z)
        cache.features.append(f)
        cache.logits.append(logits)
        cache.log_probs.append(logp)
        cache.probs.append(np.exp(logp))
        if cfg.normalize_features:
            r = np.sqrt((f * f).sum(axis=1, keepdims=True) + NORM_EPS)
            cache.norms.append(r)
            cache.embeddings.append(f / r)
        else:
            cache.norms.append(None)
            cache.embeddings.append(f)
    return cache


def backward(params: Parameters, cache: ForwardCache, grad_logits=None, grad_features=None) -> dict:
    """Chain rule back to every parameter.

    ``grad_logits[j]`` is dL/dlogits for head j and ``grad_features[j]`` is dL/d(embedding j),
    i.e. with respect to the normalised features when normalisation is on. Either list may
    be None, and individual entries may be None for attributes the loss does not touch.
    """
    cfg = params.config
    t = params.tensors
    n_attr = cfg.schema.n_attr
    grad_logits = grad_logits if grad_logits is not None else [None] * n_attr
    grad_features = grad_features if grad_features is not None else [None] * n_attr
    if len(grad_logits) != n_attr or len(grad_features) != n_attr:
        raise ContractError("need one upstream gradient slot per attribute")

    grads = {}
    h_top = cache.trunk_out[-1]
    dh = np.zeros_like(h_top)
    for j in range(n_attr):
        f = cache.features[j]
        df = np.zeros_like(f)
        gl = grad_logits[j]
        if gl is not None:
            if gl.shape != cache.logits[j].shape:
                raise ContractError(f"grad_logits[{j}] shape {gl.shape} != logits shape {cache.logits[j].shape}")
            grads[f"head.{j}.W"] = gl.T @ f
            grads[f"head.{j}.b"] = gl.sum(axis=0)
            df += gl @ t[f"head.{j}.W"]
        else:
            grads[f"head.{j}.W"] = np.zeros_like(t[f"head.{j}.W"])
            grads[f"head.{j}.b"] = np.zeros_like(t[f"head.{j}.b"])
        ge = grad_features[j]
        if ge is not None:
            if ge.shape != f.shape:
                raise ContractError(f"grad_features[{j}] shape {ge.shape} != feature shape {f.shape}")
            if cache.normalized:
                e, r = cache.embeddings[j], cache.norms[j]
                # d(f/r)/df = (I - e e^T) / r
                df += (ge - e * (e * ge).sum(axis=1, keepdims=True)) / r
            else:
                df += ge
        dz = df * (cache.branch_pre[j] > 0)
        grads[f"branch.{j}.W"] = dz.T @ h_top
        grads[f"branch.{j}.b"] = dz.sum(axis=0)
        dh += dz @ t[f"branch.{j}.W"]

    for l in reversed(range(len(cfg.trunk_layer_sizes))):
        dz = dh * (cache.trunk_pre[l] > 0)
        h_in = cache.trunk_out[l - 1] if l > 0 else cache.inputs
        grads[f"trunk.{l}.W"] = dz.T @ h_in
        grads[f"trunk.{l}.b"] = dz.sum(axis=0)
        if l > 0:
            dh = dz @ t[f"trunk.{l}.W"]
    return {k: grads[k] for k in t}


@dataclass
class OptimState:
    velocity: dict
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005

    @classmethod
    def zeros_like(cls, params: Parameters, **hyper) -> "OptimState":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()}, **hyper)


def sgd_step(params: Parameters, grads: dict, state: OptimState) -> None:
    """In place: v <- momentum*v - lr*(g + weight_decay*w); w <- w + v."""
    for name, w in params.tensors.items():
        g = grads[name]
        v = state.velocity[name]
        if g.shape != w.shape or v.shape != w.shape:
            raise ContractError(f"shape mismatch for {name}")
        v *= state.momentum
        v -= state.lr * (g + state.weight_decay * w)
        w += v


def predict(params: Parameters, batch_features) -> np.ndarray:
    cache = forward(params, batch_features)
    return np.stack([cache.predictions(j) for j in range(cache.n_attr)], axis=1)

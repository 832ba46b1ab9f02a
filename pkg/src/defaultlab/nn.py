"""Feed-forward default classifier trained with mini-batch Adam.

Hidden layers apply affine -> (batch norm) -> activation -> (inverted dropout);
the output is a single sigmoid unit.  With no hidden layers the network is a
logistic regression.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from .data import ObservationTable, ScalingParams
from .errors import DimensionError, EmptyInputError, ModelError, StaleCacheError
from .metrics import PredictionSet, cross_entropy
from .seeding import derive_rng, derive_seed

CLIP = 1e-7
BN_EPS = 1e-3
BN_MOMENTUM = 0.99
FORMAT = "defaultlab.network"
FORMAT_VERSION = 1

ACTIVATIONS = ("relu", "sigmoid", "tanh", "selu")
_SELU_ALPHA = 1.6732632423543772
_SELU_SCALE = 1.0507009873554805

_tokens = itertools.count(1)


@dataclass(frozen=True)
class NetworkArchitecture:
    layer_sizes: tuple = ()
    activation: str = "relu"
    dropout_rate: float = 0.0
    use_batchnorm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(w) for w in self.layer_sizes))
        if any(w < 1 for w in self.layer_sizes):
            raise ModelError("hidden layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError("dropout_rate must lie in [0, 1)")

    @property
    def depth(self):
        return len(self.layer_sizes)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 10
    learning_rate: float = 0.001
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.batch_size < 1:
            raise ModelError("batch_size must be >= 1")
        if self.patience < 1:
            raise ModelError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ModelError("max_epochs must be >= 1")


# Large reference architectures.  Batch size and learning rate for the pooled preset
# are the out-of-sample values, which were kept unchanged.
PRESETS = {
    "ofs-dnn": (
        NetworkArchitecture((150, 600, 1000, 600, 400), "relu", 0.5, True),
        TrainConfig(batch_size=4096, learning_rate=0.003, patience=50, max_epochs=1000),
    ),
    "pooled-dnn": (
        NetworkArchitecture((512, 1024, 2048, 1024, 512), "relu", 0.2, True),
        TrainConfig(batch_size=4096, learning_rate=0.003, patience=50, max_epochs=1000),
    ),
}


def depth_sweep_architecture(n_layers, width=512, dropout_rate=0.0, activation="relu"):
    """Equal-width network used to compare depths (0 layers is logistic)."""
    return NetworkArchitecture((width,) * int(n_layers), activation, dropout_rate, False)


@dataclass(eq=False)
class NetworkModel:
    """Weights ``W[l]`` have shape (units out, units in)."""

    architecture: NetworkArchitecture
    input_dim: int
    weights: list
    biases: list
    bn_gamma: list = field(default_factory=list)
    bn_beta: list = field(default_factory=list)
    bn_mean: list = field(default_factory=list)
    bn_var: list = field(default_factory=list)
    scaling: Optional[ScalingParams] = None
    token: int = field(default_factory=lambda: next(_tokens))

    def parameters(self):
        """Trainable arrays in a fixed order (shared with gradients)."""
        out = []
        n_hidden = self.architecture.depth
        for l in range(n_hidden + 1):
            out.append(self.weights[l])
            out.append(self.biases[l])
            if l < n_hidden and self.architecture.use_batchnorm:
                out.append(self.bn_gamma[l])
                out.append(self.bn_beta[l])
        return out

    def parameter_count(self):
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))

    def copy(self):
        return NetworkModel(
            architecture=self.architecture,
            input_dim=self.input_dim,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            bn_gamma=[a.copy() for a in self.bn_gamma],
            bn_beta=[a.copy() for a in self.bn_beta],
            bn_mean=[a.copy() for a in self.bn_mean],
            bn_var=[a.copy() for a in self.bn_var],
            scaling=self.scaling,
        )

    def touch(self):
        """Mark parameters as changed; invalidates outstanding caches."""
        self.token = next(_tokens)

    # -- serialization -----------------------------------------------------
    def to_dict(self):
        arch = self.architecture
        layers = []
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            entry = {"shape": list(w.shape), "weights": w.ravel().tolist(), "bias": b.tolist()}
            if l < arch.depth and arch.use_batchnorm:
                entry["bn_gamma"] = self.bn_gamma[l].tolist()
                entry["bn_beta"] = self.bn_beta[l].tolist()
                entry["bn_mean"] = self.bn_mean[l].tolist()
                entry["bn_var"] = self.bn_var[l].tolist()
            layers.append(entry)
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "architecture": {
                "layer_sizes": list(arch.layer_sizes),
                "activation": arch.activation,
                "dropout_rate": arch.dropout_rate,
                "use_batchnorm": arch.use_batchnorm,
            },
            "input_dim": self.input_dim,
            "layers": layers,
            "scaling": None if self.scaling is None else self.scaling.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != FORMAT:
            raise ModelError(f"not a network document (format={d.get('format')!r})")
        if d.get("version") != FORMAT_VERSION:
            raise ModelError(f"unsupported network format version {d.get('version')!r}")
        a = d["architecture"]
        arch = NetworkArchitecture(
            tuple(a["layer_sizes"]), a["activation"], a["dropout_rate"], a["use_batchnorm"]
        )
        weights, biases, g, be, mu, var = [], [], [], [], [], []
        for l, entry in enumerate(d["layers"]):
            weights.append(np.array(entry["weights"], dtype=float).reshape(entry["shape"]))
            biases.append(np.array(entry["bias"], dtype=float))
            if l < arch.depth and arch.use_batchnorm:
                g.append(np.array(entry["bn_gamma"], dtype=float))
                be.append(np.array(entry["bn_beta"], dtype=float))
                mu.append(np.array(entry["bn_mean"], dtype=float))
                var.append(np.array(entry["bn_var"], dtype=float))
        scaling = d.get("scaling")
        return cls(
            arch, int(d["input_dim"]), weights, biases, g, be, mu, var,
            None if scaling is None else ScalingParams.from_dict(scaling),
        )


def init_network(arch: NetworkArchitecture, input_dim: int, seed=0) -> NetworkModel:
    """Fan-in scaled normal weights (variance 2/fan_in for RELU, else 1/fan_in), zero biases."""
    if input_dim < 1:
        raise ModelError("input_dim must be >= 1")
    rng = derive_rng(seed, "init")
    sizes = [int(input_dim)] + list(arch.layer_sizes) + [1]
    gain = 2.0 if arch.activation == "relu" else 1.0
    weights, biases = [], []
    for l in range(len(sizes) - 1):
        fan_in, fan_out = sizes[l], sizes[l + 1]
        weights.append(rng.standard_normal((fan_out, fan_in)) * math.sqrt(gain / fan_in))
        biases.append(np.zeros(fan_out))
    model = NetworkModel(arch, int(input_dim), weights, biases)
    if arch.use_batchnorm:
        for w in arch.layer_sizes:
            model.bn_gamma.append(np.ones(w))
            model.bn_beta.append(np.zeros(w))
            model.bn_mean.append(np.zeros(w))
            model.bn_var.append(np.ones(w))
    return model


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return expit(z)
    if name == "tanh":
        return np.tanh(z)
    return _SELU_SCALE * np.where(z > 0, z, _SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))


def _activation_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "tanh":
        return 1.0 - a * a
    return np.where(z > 0, _SELU_SCALE, a + _SELU_SCALE * _SELU_ALPHA)


def forward(model: NetworkModel, batch, mode="inference", seed=0):
    """Propagate ``batch`` through the network.

    Returns ``(probabilities, cache)``.  Train mode samples dropout masks from
    ``seed`` and normalizes with batch statistics; inference mode uses the
    running statistics and no dropout.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.input_dim:
        raise DimensionError(f"batch has {x.shape[1]} columns, network expects {model.input_dim}")
    if mode not in ("train", "inference"):
        raise ValueError(f"mode must be 'train' or 'inference', not {mode!r}")
    arch = model.architecture
    train = mode == "train"
    rng = np.random.default_rng(derive_seed(seed, "dropout")) if train and arch.dropout_rate > 0 else None
    use_bn_stats = train and x.shape[0] >= 2
    layers = []
    a = x
    for l in range(arch.depth):
        rec = {"input": a}
        z = a @ model.weights[l].T + model.biases[l]
        rec["z"] = z
        if arch.use_batchnorm:
            if use_bn_stats:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
            else:
                mu, var = model.bn_mean[l], model.bn_var[l]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv_std
            rec.update(bn_mu=mu, bn_var=var, inv_std=inv_std, zhat=zhat, batch_stats=use_bn_stats)
            pre = model.bn_gamma[l] * zhat + model.bn_beta[l]
        else:
            pre = z
        rec["pre"] = pre
        h = _activate(arch.activation, pre)
        rec["act"] = h
        if rng is not None:
            keep = 1.0 - arch.dropout_rate
            mask = (rng.random(h.shape) < keep) / keep
            rec["mask"] = mask
            h = h * mask
        layers.append(rec)
        a = h
    logit = a @ model.weights[-1].T + model.biases[-1]
    logit = logit[:, 0]
    p_raw = expit(logit)
    p = np.clip(p_raw, CLIP, 1.0 - CLIP)
    cache = {
        "mode": mode,
        "token": model.token,
        "layers": layers,
        "last_input": a,
        "p_raw": p_raw,
        "n": x.shape[0],
    }
    return p, cache


loss = cross_entropy


def backward(model: NetworkModel, cache, labels):
    """Gradients of the mean cross-entropy, aligned with ``model.parameters()``."""
    if cache.get("mode") != "train":
        raise StaleCacheError("backward needs a cache from a train-mode forward pass")
    if cache.get("token") != model.token:
        raise StaleCacheError("cache was produced by different or since-updated parameters")
    y = np.asarray(labels, dtype=np.float64)
    n = cache["n"]
    if y.shape != (n,):
        raise DimensionError(f"labels have shape {y.shape}, batch has {n} rows")
    arch = model.architecture
    delta = ((cache["p_raw"] - y) / n)[:, None]
    grads_rev = []
    a_last = cache["last_input"]
    grads_rev.append(delta.sum(axis=0))
    grads_rev.append(delta.T @ a_last)
    da = delta @ model.weights[-1]
    for l in range(arch.depth - 1, -1, -1):
        rec = cache["layers"][l]
        if "mask" in rec:
            da = da * rec["mask"]
        dpre = da * _activation_grad(arch.activation, rec["pre"], rec["act"])
        if arch.use_batchnorm:
            zhat = rec["zhat"]
            grads_rev.append((dpre).sum(axis=0))  # beta
            grads_rev.append((dpre * zhat).sum(axis=0))  # gamma
            dzhat = dpre * model.bn_gamma[l]
            if rec["batch_stats"]:
                m = dzhat.shape[0]
                dz = rec["inv_std"] / m * (
                    m * dzhat - dzhat.sum(axis=0) - zhat * (dzhat * zhat).sum(axis=0)
                )
            else:
                dz = dzhat * rec["inv_std"]
        else:
            dz = dpre
        grads_rev.append(dz.sum(axis=0))
        grads_rev.append(dz.T @ rec["input"])
        if l > 0:
            da = dz @ model.weights[l]
    return grads_rev[::-1]


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    @classmethod
    def zeros_like(cls, params, learning_rate=0.001, beta1=0.9, beta2=0.999, epsilon=1e-7):
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            0, learning_rate, beta1, beta2, epsilon,
        )

    def copy(self):
        return AdamState(
            [a.copy() for a in self.m], [a.copy() for a in self.v], self.t,
            self.learning_rate, self.beta1, self.beta2, self.epsilon,
        )


def _adam_update(params, grads, state: AdamState):
    """In-place update of ``params`` and ``state``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def adam_step(model: NetworkModel, gradients, state: AdamState):
    """One Adam update; returns new ``(model, state)`` and leaves inputs untouched."""
    new_model = model.copy()
    new_state = state.copy()
    params = new_model.parameters()
    if len(params) != len(gradients) or any(p.shape != np.shape(g) for p, g in zip(params, gradients)):
        raise DimensionError("gradients do not match the model parameters")
    _adam_update(params, gradients, new_state)
    return new_model, new_state


def predict(model: NetworkModel, x):
    """Inference-mode probabilities for a raw feature matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    out = np.empty(x.shape[0])
    step = 65536
    for start in range(0, x.shape[0], step):
        out[start:start + step] = forward(model, x[start:start + step], "inference")[0]
    return out


def predict_proba(model: NetworkModel, table: ObservationTable) -> PredictionSet:
    return PredictionSet.from_table(predict(model, table.rows), table)


def _update_running_stats(model, cache):
    for l, rec in enumerate(cache["layers"]):
        if rec.get("batch_stats"):
            model.bn_mean[l] *= BN_MOMENTUM
            model.bn_mean[l] += (1.0 - BN_MOMENTUM) * rec["bn_mu"]
            model.bn_var[l] *= BN_MOMENTUM
            model.bn_var[l] += (1.0 - BN_MOMENTUM) * rec["bn_var"]


def _snapshot(model):
    return [a.copy() for a in model.parameters()] + [a.copy() for a in model.bn_mean + model.bn_var]


def _restore(model, snap):
    targets = model.parameters() + model.bn_mean + model.bn_var
    for dst, src in zip(targets, snap):
        dst[...] = src
    model.touch()


def fit_arrays(model: NetworkModel, x, y, x_val=None, y_val=None, config: TrainConfig = TrainConfig()):
    """Train on arrays.  See :func:`train`."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyInputError("training set is empty")
    if x.shape[1] != model.input_dim:
        raise DimensionError(f"training data has {x.shape[1]} columns, network expects {model.input_dim}")
    has_val = x_val is not None and len(x_val) > 0
    model = model.copy()
    state = AdamState.zeros_like(
        model.parameters(), config.learning_rate, config.beta1, config.beta2, config.epsilon
    )
    n = x.shape[0]
    history = []
    best = math.inf
    best_snap = None
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        order = derive_rng(config.seed, "shuffle", epoch).permutation(n)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            _, cache = forward(model, x[idx], "train", derive_seed(config.seed, "batch", epoch, b))
            grads = backward(model, cache, y[idx])
            _adam_update(model.parameters(), grads, state)
            _update_running_stats(model, cache)
            model.touch()
        train_loss = loss(predict(model, x), y)
        val_loss = loss(predict(model, x_val), y_val) if has_val else None
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if not has_val:
            continue
        if val_loss < best:
            best = val_loss
            best_snap = _snapshot(model)
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    if best_snap is not None:
        _restore(model, best_snap)
    return model, history


def train(model: NetworkModel, train: ObservationTable, validation: Optional[ObservationTable],
          config: TrainConfig = TrainConfig()):
    """Mini-batch Adam with per-epoch reshuffling and early stopping.

    Stops once validation loss has not improved for ``config.patience``
    epochs and returns the parameters of the best validation epoch together
    with the per-epoch loss history.
    """
    if len(train) == 0:
        raise EmptyInputError("training set is empty")
    xv = yv = None
    if validation is not None and len(validation) > 0:
        xv, yv = validation.rows, validation.labels
    return fit_arrays(model, train.rows, train.labels, xv, yv, config)


def with_scaling(model: NetworkModel, scaling: ScalingParams) -> NetworkModel:
    return replace(model, scaling=scaling)

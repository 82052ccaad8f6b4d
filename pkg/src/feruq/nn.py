"""Feed-forward classifier written directly against numpy.

ReLU hidden layers, a linear output layer feeding a softmax, and mean
categorical cross-entropy over hard labels. Two stochastic regularisers are
supported through :class:`StochasticMask`:

* ``dropout`` zeroes hidden activations,
* ``dropconnect`` zeroes individual weights (every layer, output included).

Both use the inverted convention: survivors are scaled by ``1 / (1 - p)`` when
the mask is applied, so a mask-free forward pass needs no rescaling.

Weights are stored as ``(fan_in, fan_out)`` matrices and applied as
``h @ W + b``.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .exceptions import DimensionError, TrainingError, UsageError, ValidationError

logger = logging.getLogger(__name__)

DROP_MODES = ("none", "dropout", "dropconnect")
OPTIMIZERS = ("sgd", "adam")
DEFAULT_LEARNING_RATES = {"adam": 1e-3, "sgd": 1e-2}
LOG_EPS = 1e-12
FORMAT_VERSION = 1
_U64 = 2**64


# ---------------------------------------------------------------------------
# configuration and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and regularisation settings of one network.

    Parameters
    ----------
    input_dim : int
        Length of the flattened feature vector.
    hidden_dims : tuple of int, default=(64,)
        Widths of the ReLU hidden layers. May be empty (softmax regression).
    num_classes : int, default=8
    drop_rate : float, default=0.0
        Bernoulli drop probability, ``0 <= drop_rate < 1``.
    drop_mode : {'none', 'dropout', 'dropconnect'}, default='none'
    seed : int, default=0
        Unsigned 64-bit seed for initialisation, shuffling and training masks.
    """

    input_dim: int
    hidden_dims: tuple = (64,)
    num_classes: int = 8
    drop_rate: float = 0.0
    drop_mode: str = "none"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if int(self.input_dim) < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValidationError(f"all layer dims must be >= 1, got {self.layer_dims}")
        if int(self.num_classes) < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= float(self.drop_rate) < 1.0:
            raise ValidationError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        if self.drop_mode not in DROP_MODES:
            raise ValidationError(f"drop_mode must be one of {DROP_MODES}, got {self.drop_mode!r}")
        if not 0 <= int(self.seed) < _U64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        object.__setattr__(self, "input_dim", int(self.input_dim))
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "drop_rate", float(self.drop_rate))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def layer_dims(self):
        return (int(self.input_dim), *self.hidden_dims, int(self.num_classes))

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ModelParams:
    """Per-layer weight matrices and bias vectors."""

    weights: list
    biases: list

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias vector per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(
                    f"layer {i} expects {w.shape[0]} inputs but layer {i - 1} emits "
                    f"{self.weights[i - 1].shape[1]}"
                )

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def layer_dims(self):
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def arrays(self):
        """Flat list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arrays):
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    def copy(self):
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def equals(self, other):
        """Exact, element-wise equality of every array."""
        return (
            isinstance(other, ModelParams)
            and self.n_layers == other.n_layers
            and all(
                a.shape == b.shape and np.array_equal(a, b)
                for a, b in zip(self.arrays(), other.arrays())
            )
        )

    def check_config(self, config):
        if self.layer_dims != config.layer_dims:
            raise DimensionError(
                f"parameters have layer dims {self.layer_dims}, config expects {config.layer_dims}"
            )


def init_params(config, rng=None):
    """Glorot-uniform weights and zero biases.

    With ``rng=None`` a generator seeded from ``config.seed`` is used, so the
    result equals the starting point of :func:`train` for the same config.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    dims = config.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights, biases)


# ---------------------------------------------------------------------------
# stochastic masks
# ---------------------------------------------------------------------------


@dataclass
class StochasticMask:
    """Binary keep-masks for one forward pass.

    ``target='activations'`` holds one mask per hidden layer, shaped like the
    hidden activations (``(h,)`` to share across a batch, or ``(n, h)``).
    ``target='weights'`` holds one mask per weight matrix, shaped like it.
    """

    target: str
    masks: list
    drop_rate: float
    seed: int = None

    def __post_init__(self):
        if self.target not in ("activations", "weights"):
            raise ValidationError(f"mask target must be 'activations' or 'weights', got {self.target!r}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValidationError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        self.masks = [np.asarray(m, dtype=np.float64) for m in self.masks]
        for m in self.masks:
            if not np.all((m == 0.0) | (m == 1.0)):
                raise ValidationError("mask entries must be 0 or 1")

    @property
    def scale(self):
        return 1.0 / (1.0 - self.drop_rate)

    def check_compatible(self, params, n_rows=None):
        if self.target == "weights":
            expected = [w.shape for w in params.weights]
            got = [m.shape for m in self.masks]
            if got != expected:
                raise DimensionError(f"weight masks {got} do not match weight shapes {expected}")
            return
        hidden = params.layer_dims[1:-1]
        if len(self.masks) != len(hidden):
            raise DimensionError(f"{len(self.masks)} activation masks for {len(hidden)} hidden layers")
        for m, h in zip(self.masks, hidden):
            ok = m.shape == (h,) or (n_rows is not None and m.shape == (n_rows, h))
            if not ok:
                raise DimensionError(f"activation mask of shape {m.shape} does not fit width {h}")

    def same_as(self, other):
        return (
            other is not None
            and self.target == other.target
            and self.drop_rate == other.drop_rate
            and len(self.masks) == len(other.masks)
            and all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.masks, other.masks))
        )


def sample_mask(config, rng, n_rows=None, mode=None):
    """Draw a fresh :class:`StochasticMask` for ``config``.

    Returns ``None`` when the mode is ``'none'``. Dropout masks are drawn per
    row when ``n_rows`` is given; dropconnect masks never depend on batch size.
    """
    mode = config.drop_mode if mode is None else mode
    p = config.drop_rate
    dims = config.layer_dims
    if mode == "none":
        return None
    if mode == "dropout":
        shapes = [(h,) if n_rows is None else (n_rows, h) for h in dims[1:-1]]
        target = "activations"
    elif mode == "dropconnect":
        shapes = list(zip(dims[:-1], dims[1:]))
        target = "weights"
    else:
        raise ValidationError(f"unknown drop mode {mode!r}")
    masks = [(rng.random(s) >= p).astype(np.float64) for s in shapes]
    return StochasticMask(target, masks, p)


# ---------------------------------------------------------------------------
# forward / loss / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    layer_inputs: list
    pre_activations: list
    effective_weights: list
    mask: StochasticMask = None
    squeeze: bool = False


def _as_batch(params, X):
    X = np.asarray(X, dtype=np.float64)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.layer_dims[0]:
        raise DimensionError(f"expected input of length {params.layer_dims[0]}, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("input contains non-finite values")
    return X, squeeze


def forward(params, X, mask=None, return_cache=False):
    """Pre-softmax logits for one input vector or a batch of rows.

    Parameters
    ----------
    params : ModelParams
    X : array_like of shape (input_dim,) or (n, input_dim)
    mask : StochasticMask, optional
        Without a mask the pass is deterministic.
    return_cache : bool, default=False
        Also return the intermediate values :func:`backward` needs.
    """
    X, squeeze = _as_batch(params, X)
    if mask is not None:
        mask.check_compatible(params, n_rows=X.shape[0])
    weight_mask = mask is not None and mask.target == "weights"
    act_mask = mask is not None and mask.target == "activations"

    h = X
    inputs, pre, eff = [], [], []
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if weight_mask:
            w = w * mask.masks[i] * mask.scale
        inputs.append(h)
        eff.append(w)
        z = h @ w + b
        pre.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
            if act_mask:
                h = h * mask.masks[i] * mask.scale
        else:
            h = z
    logits = h[0] if squeeze else h
    if return_cache:
        return logits, ForwardCache(inputs, pre, eff, mask, squeeze)
    return logits


def softmax(logits):
    """Max-subtracted softmax over the last axis.

    Entries are floored at the smallest normal double, so they stay strictly
    positive even when the logit gap exceeds the exp underflow range.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValidationError("logits contain non-finite values")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return np.maximum(p, np.finfo(np.float64).tiny)


def _check_labels(labels, n, num_classes):
    y = np.asarray(labels)
    if y.ndim == 0:
        y = y[None]
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValidationError("labels must be integer class indices")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= num_classes):
        raise ValidationError(f"labels must lie in [0, {num_classes})")
    return y


def cross_entropy_loss(probs, labels):
    """``-log p[label]`` with ``p`` clamped below at 1e-12.

    A single probability vector and label give a scalar; a batch gives the
    mean over rows.
    """
    P = np.asarray(probs, dtype=np.float64)
    single = P.ndim == 1
    P = np.atleast_2d(P)
    y = _check_labels(labels, P.shape[0], P.shape[1])
    losses = -np.log(np.maximum(P[np.arange(len(y)), y], LOG_EPS))
    return float(losses[0]) if single else float(losses.mean())


def backward(params, X, labels, mask=None, cache=None):
    """Gradients of the mean cross-entropy loss with respect to every parameter.

    If ``cache`` from a previous :func:`forward` call is supplied it is reused,
    and must have been produced with the same ``mask``.

    Returns
    -------
    grads : ModelParams
        Same shapes as ``params``.
    loss : float
        The loss value at which the gradient was taken.
    """
    if cache is None:
        logits, cache = forward(params, X, mask=mask, return_cache=True)
        logits = np.atleast_2d(logits)
    else:
        same = (mask is None and cache.mask is None) or (mask is not None and mask.same_as(cache.mask))
        if not same:
            raise UsageError("backward must use the same mask as the forward pass that built the cache")
        logits = cache.pre_activations[-1]
    probs = softmax(logits)
    n, k = probs.shape
    y = _check_labels(labels, n, k)
    true_p = probs[np.arange(n), y]
    loss = float(np.mean(-np.log(np.maximum(true_p, LOG_EPS))))

    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    # clamped rows have a constant loss
    delta[true_p < LOG_EPS] = 0.0
    delta /= n

    weight_mask = mask is not None and mask.target == "weights"
    act_mask = mask is not None and mask.target == "activations"
    gw = [None] * params.n_layers
    gb = [None] * params.n_layers
    for i in reversed(range(params.n_layers)):
        g_eff = cache.layer_inputs[i].T @ delta
        gw[i] = g_eff * mask.masks[i] * mask.scale if weight_mask else g_eff
        gb[i] = delta.sum(axis=0)
        if i:
            da = delta @ cache.effective_weights[i].T
            if act_mask:
                da = da * mask.masks[i - 1] * mask.scale
            delta = da * (cache.pre_activations[i - 1] > 0.0)
    return ModelParams(gw, gb), loss


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """SGD or Adam state.

    SGD uses ``lr_t = lr0 / (1 + decay * t)`` where ``t`` counts previous
    steps. Adam uses bias-corrected moments with the usual constants.
    """

    kind: str = "adam"
    learning_rate: float = None
    decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default=None, repr=False)
    v: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}, got {self.kind!r}")
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LEARNING_RATES[self.kind]
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not self.decay >= 0:
            raise ValidationError(f"decay must be non-negative, got {self.decay}")

    def current_learning_rate(self):
        if self.kind == "sgd":
            return self.learning_rate / (1.0 + self.decay * self.step_count)
        return self.learning_rate


def optimizer_step(state, params, grads):
    """Apply one update and return new parameters; ``state`` is advanced in place.

    Raises :class:`TrainingError` without touching ``state`` when a gradient or
    an updated parameter is non-finite.
    """
    p_arrays = params.arrays()
    g_arrays = grads.arrays()
    if [a.shape for a in p_arrays] != [g.shape for g in g_arrays]:
        raise DimensionError("gradient shapes do not match parameter shapes")
    if not grads.is_finite():
        raise TrainingError(f"non-finite gradient at step {state.step_count}; step refused")

    t = state.step_count + 1
    if state.kind == "sgd":
        lr = state.current_learning_rate()
        new = [p - lr * g for p, g in zip(p_arrays, g_arrays)]
        m = v = None
    else:
        m_prev = state.m or [np.zeros_like(p) for p in p_arrays]
        v_prev = state.v or [np.zeros_like(p) for p in p_arrays]
        b1, b2 = state.beta1, state.beta2
        m = [b1 * mi + (1.0 - b1) * g for mi, g in zip(m_prev, g_arrays)]
        v = [b2 * vi + (1.0 - b2) * g * g for vi, g in zip(v_prev, g_arrays)]
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        new = [
            p - state.learning_rate * (mi / c1) / (np.sqrt(vi / c2) + state.eps)
            for p, mi, vi in zip(p_arrays, m, v)
        ]
    updated = ModelParams.from_arrays(new)
    if not updated.is_finite():
        raise TrainingError(f"update at step {state.step_count} produced non-finite parameters; step refused")
    state.step_count = t
    if state.kind == "adam":
        state.m, state.v = m, v
    return updated


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def check_dataset(config, X, y):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError(f"training data must be a non-empty 2-D array, got shape {X.shape}")
    if X.shape[1] != config.input_dim:
        raise DimensionError(f"config.input_dim={config.input_dim} but data has {X.shape[1]} features")
    if not np.all(np.isfinite(X)):
        raise ValidationError("training data contains non-finite values")
    return X, _check_labels(y, X.shape[0], config.num_classes)


def train(config, X, y, epochs=80, batch_size=32, optimizer=None):
    """Minibatch training from a seeded Glorot initialisation.

    Every epoch reshuffles the rows and every batch gets a fresh mask when
    ``config.drop_mode`` is not ``'none'``. All randomness flows from
    ``config.seed``, so repeated calls are bitwise identical.

    Parameters
    ----------
    config : ModelConfig
    X : array_like of shape (n, input_dim)
    y : array_like of shape (n,)
        Integer class indices.
    epochs : int, default=80
    batch_size : int, default=32
    optimizer : OptimizerState, optional
        Fresh Adam state at the default learning rate when omitted.

    Returns
    -------
    params : ModelParams
    history : list of float
        Mean training loss of each epoch, indexed by epoch.
    """
    X, y = check_dataset(config, X, y)
    if int(batch_size) < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    if int(epochs) < 0:
        raise ValidationError(f"epochs must be >= 0, got {epochs}")
    if optimizer is None:
        optimizer = OptimizerState()

    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng)
    n = X.shape[0]
    history = []
    for epoch in range(int(epochs)):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, int(batch_size)):
            idx = order[start:start + int(batch_size)]
            mask = sample_mask(config, rng, n_rows=len(idx))
            # inputs were validated above, so non-finite values here mean divergence
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    grads, loss = backward(params, X[idx], y[idx], mask=mask)
                except ValidationError as exc:
                    raise TrainingError(f"epoch {epoch}: {exc}") from exc
            params = optimizer_step(optimizer, params, grads)
            total += loss * len(idx)
        history.append(total / n)
        logger.debug("epoch %d loss %.6f", epoch, history[-1])
    return params, history


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def model_to_dict(config, params):
    params.check_config(config)
    if not params.is_finite():
        raise ValidationError("cannot serialise non-finite parameters")
    return {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "layers": [{"weights": w.tolist(), "biases": b.tolist()} for w, b in zip(params.weights, params.biases)],
    }


def model_from_dict(doc):
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported model format_version {doc.get('format_version')!r}")
    config = ModelConfig.from_dict(doc["config"])
    weights = [np.array(layer["weights"], dtype=np.float64).reshape(-1, len(layer["biases"])) for layer in doc["layers"]]
    biases = [np.array(layer["biases"], dtype=np.float64) for layer in doc["layers"]]
    params = ModelParams(weights, biases)
    params.check_config(config)
    return config, params


def save_model(path, config, params):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(model_to_dict(config, params), fh, allow_nan=False)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))

"""Small feed-forward networks with hand-written backpropagation.

The policy network is a kernel: the same MLP scores every row of an
observation and a masked softmax over the scores gives the action
distribution, so reordering rows reorders the probabilities with them.
The value network is a plain MLP over the flattened observation.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import ClassVar, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.exceptions import ModelFormatError, NoLegalAction
from app.simulator import JOB_FEATURES, MAX_OBSV_SIZE, ObservationMatrix

POLICY_HIDDEN = (32, 16, 8)
VALUE_HIDDEN = (64, 32, 16)
POLICY_PARAM_BUDGET = 1000
MASK_VALUE = -1e9

TANH = "tanh"
LINEAR = "linear"
_ACTIVATION_CODES = {TANH: 0, LINEAR: 1}
_KIND_CODES = {"policy": 0, "value": 1}

MODEL_MAGIC = b"SRLM"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sHBHHB")
_LAYER = struct.Struct("<IIB")


@dataclass
class MlpParams:
    """Weights (out x in), biases (out) and one activation per layer."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activations: List[str]

    def __post_init__(self) -> None:
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise ValueError("weights, biases and activations must have the same non-zero length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input {w.shape[1]} does not chain to {self.weights[i - 1].shape[0]}")
            if act not in _ACTIVATION_CODES:
                raise ValueError(f"layer {i}: unknown activation {act!r}")

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def is_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        """All parameters in layer order, weights row-major then biases."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts).astype(np.float64)

    def with_flat(self, vector: np.ndarray) -> "MlpParams":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} values, got {vector.shape}")
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vector[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(vector[pos:pos + b.size].copy())
            pos += b.size
        return MlpParams(weights, biases, list(self.activations))

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], list(self.activations))


@dataclass
class Gradient:
    """Same layout as the MlpParams it differentiates."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "Gradient":
        return cls([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)


def init_params(
    layer_sizes: Sequence[int],
    seed: int,
    activations: Optional[Sequence[str]] = None,
) -> MlpParams:
    """Xavier-uniform weights and zero biases; tanh hidden layers and a linear head by default."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least an input and an output size")
    rng = np.random.default_rng(seed)
    n_layers = len(layer_sizes) - 1
    if activations is None:
        activations = [TANH] * (n_layers - 1) + [LINEAR]

    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, list(activations))


def mlp_forward(params: MlpParams, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Forward a batch (rows are samples); returns the output and the layer activations."""
    a = np.asarray(x, dtype=np.float64)
    cache = [a]
    for w, b, act in zip(params.weights, params.biases, params.activations):
        z = a @ w.T + b
        a = np.tanh(z) if act == TANH else z
        cache.append(a)
    return a, cache


def mlp_backward(params: MlpParams, cache: List[np.ndarray], upstream: np.ndarray) -> Gradient:
    """Gradient of sum(upstream * output) with respect to every parameter."""
    delta = np.asarray(upstream, dtype=np.float64)
    grad_w: List[np.ndarray] = [np.empty(0)] * len(params.weights)
    grad_b: List[np.ndarray] = [np.empty(0)] * len(params.weights)
    for i in reversed(range(len(params.weights))):
        if params.activations[i] == TANH:
            delta = delta * (1.0 - cache[i + 1] ** 2)
        grad_w[i] = delta.T @ cache[i]
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ params.weights[i]
    return Gradient(grad_w, grad_b)


@dataclass
class PolicyNet:
    """Kernel network scoring each observation row independently."""

    kernel: MlpParams
    max_obsv_size: int = MAX_OBSV_SIZE
    kind: ClassVar[str] = "policy"

    def __post_init__(self) -> None:
        if self.kernel.layer_sizes[-1] != 1:
            raise ValueError("policy kernel must end in a scalar score")
        if self.kernel.num_params >= POLICY_PARAM_BUDGET:
            raise ValueError(f"policy kernel has {self.kernel.num_params} parameters, "
                             f"budget is {POLICY_PARAM_BUDGET}")

    @classmethod
    def create(
        cls,
        seed: int,
        job_features: int = JOB_FEATURES,
        max_obsv_size: int = MAX_OBSV_SIZE,
        hidden: Sequence[int] = POLICY_HIDDEN,
    ) -> "PolicyNet":
        return cls(init_params([job_features, *hidden, 1], seed), max_obsv_size)

    @property
    def params(self) -> MlpParams:
        return self.kernel

    @property
    def job_features(self) -> int:
        return self.kernel.layer_sizes[0]

    @property
    def num_params(self) -> int:
        return self.kernel.num_params

    def with_params(self, params: MlpParams) -> "PolicyNet":
        return PolicyNet(params, self.max_obsv_size)


@dataclass
class ValueNet:
    """MLP over the flattened observation."""

    params: MlpParams
    max_obsv_size: int = MAX_OBSV_SIZE
    job_features: int = JOB_FEATURES
    kind: ClassVar[str] = "value"

    def __post_init__(self) -> None:
        if self.params.layer_sizes[0] != self.max_obsv_size * self.job_features:
            raise ValueError("value net input must be max_obsv_size * job_features")
        if self.params.layer_sizes[-1] != 1:
            raise ValueError("value net must output a scalar")

    @classmethod
    def create(
        cls,
        seed: int,
        job_features: int = JOB_FEATURES,
        max_obsv_size: int = MAX_OBSV_SIZE,
        hidden: Sequence[int] = VALUE_HIDDEN,
    ) -> "ValueNet":
        return cls(init_params([max_obsv_size * job_features, *hidden, 1], seed), max_obsv_size, job_features)

    @property
    def num_params(self) -> int:
        return self.params.num_params

    def with_params(self, params: MlpParams) -> "ValueNet":
        return ValueNet(params, self.max_obsv_size, self.job_features)


Network = Union[PolicyNet, ValueNet]


def masked_softmax(scores: np.ndarray, legal_mask: np.ndarray) -> np.ndarray:
    """Softmax over legal entries; illegal entries get probability exactly 0.

    Raises:
        NoLegalAction: the mask has no legal entry
    """
    if not legal_mask.any():
        raise NoLegalAction("no legal slot in observation")
    z = np.where(legal_mask, scores, MASK_VALUE)
    z = z - z.max()
    e = np.exp(z)
    e[~legal_mask] = 0.0
    return e / e.sum()


def policy_scores(net: PolicyNet, values: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(net.kernel, values)
    return out[:, 0]


def policy_forward(net: PolicyNet, obs: ObservationMatrix) -> np.ndarray:
    """Action probabilities, one per observation slot."""
    if not obs.legal_mask.any():
        raise NoLegalAction("no legal slot in observation")
    return masked_softmax(policy_scores(net, obs.values), obs.legal_mask)


def policy_sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Draw a slot from `probs`; zero-probability slots are never returned."""
    cdf = np.cumsum(probs)
    slot = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    if slot >= len(probs) or probs[slot] == 0.0:
        slot = int(np.flatnonzero(probs)[-1])
    return slot


def policy_argmax(probs: np.ndarray) -> int:
    """Most probable slot, lowest index on ties."""
    return int(np.argmax(probs))


def value_forward(net: ValueNet, obs: ObservationMatrix) -> float:
    out, _ = mlp_forward(net.params, obs.values.reshape(1, -1))
    return float(out[0, 0])


def backward(net: Network, obs: ObservationMatrix, upstream: Union[float, np.ndarray]) -> Gradient:
    """Exact parameter gradient for one observation.

    For a PolicyNet `upstream` is dL/dprobs (one entry per slot); for a
    ValueNet it is dL/dvalue.
    """
    if isinstance(net, PolicyNet):
        scores, cache = mlp_forward(net.kernel, obs.values)
        probs = masked_softmax(scores[:, 0], obs.legal_mask)
        g = np.asarray(upstream, dtype=np.float64)
        dscores = probs * (g - np.dot(probs, g))
        dscores[~obs.legal_mask] = 0.0
        return mlp_backward(net.kernel, cache, dscores[:, None])

    _, cache = mlp_forward(net.params, obs.values.reshape(1, -1))
    return mlp_backward(net.params, cache, np.array([[float(upstream)]]))


@dataclass
class LogProbCache:
    """Intermediate values of a batched log-probability pass."""

    layers: List[np.ndarray]
    probs: np.ndarray
    segments: np.ndarray
    action_rows: np.ndarray


def policy_log_probs(
    net: PolicyNet,
    values: np.ndarray,
    masks: np.ndarray,
    actions: np.ndarray,
) -> Tuple[np.ndarray, LogProbCache]:
    """Log-probabilities of `actions` for a batch of observations.

    Only legal rows are run through the kernel. values is (B, N, F),
    masks (B, N) and actions (B,); every action must be legal.
    """
    counts = masks.sum(axis=1)
    if (counts == 0).any():
        raise NoLegalAction("batch contains an observation without legal slots")
    batch = np.arange(len(actions))
    if not masks[batch, actions].all():
        raise ValueError("batch contains an illegal action")

    rows = values[masks]
    out, layers = mlp_forward(net.kernel, rows)
    scores = out[:, 0]

    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    segments = np.repeat(batch, counts)
    peak = np.maximum.reduceat(scores, starts)
    e = np.exp(scores - peak[segments])
    totals = np.add.reduceat(e, starts)
    probs = e / totals[segments]

    action_rows = starts + np.cumsum(masks, axis=1)[batch, actions] - 1
    logp = scores[action_rows] - peak - np.log(totals)
    return logp, LogProbCache(layers, probs, segments, action_rows)


def policy_log_prob_backward(net: PolicyNet, cache: LogProbCache, upstream: np.ndarray) -> Gradient:
    """Gradient of sum(upstream * logp) for a cached batched pass."""
    g = np.asarray(upstream, dtype=np.float64)
    dscores = -cache.probs * g[cache.segments]
    np.add.at(dscores, cache.action_rows, g)
    return mlp_backward(net.kernel, cache.layers, dscores[:, None])


def value_batch(net: ValueNet, flat_obs: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    out, layers = mlp_forward(net.params, flat_obs)
    return out[:, 0], layers


def value_batch_backward(net: ValueNet, layers: List[np.ndarray], upstream: np.ndarray) -> Gradient:
    return mlp_backward(net.params, layers, np.asarray(upstream, dtype=np.float64)[:, None])


@dataclass
class Adam:
    """Adaptive moment estimation over a flat parameter vector (minimises)."""

    size: int
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    t: int = field(default=0, init=False)

    def __post_init__(self) -> None:
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> Tuple[np.ndarray, np.ndarray, int]:
        return self.m.copy(), self.v.copy(), self.t

    def restore(self, state: Tuple[np.ndarray, np.ndarray, int]) -> None:
        m, v, t = state
        self.m, self.v, self.t = m.copy(), v.copy(), t


def save_model(path: Union[str, Path], net: Network) -> None:
    """Write a versioned model file (little-endian float32 body)."""
    params = net.params
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fp:
        fp.write(_HEADER.pack(
            MODEL_MAGIC,
            MODEL_VERSION,
            _KIND_CODES[net.kind],
            net.job_features,
            net.max_obsv_size,
            len(params.weights),
        ))
        for w, act in zip(params.weights, params.activations):
            fp.write(_LAYER.pack(w.shape[0], w.shape[1], _ACTIVATION_CODES[act]))
        fp.write(params.flat().astype("<f4").tobytes())


def load_model(
    path: Union[str, Path],
    job_features: Optional[int] = None,
    max_obsv_size: Optional[int] = None,
) -> Network:
    """Read a model file written by save_model.

    Raises:
        FileNotFoundError: the file does not exist
        ModelFormatError: bad header, truncated body or shapes that do not
            match the expected observation layout
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ModelFormatError(f"{path}: file too short")

    magic, version, kind_code, features, obsv, n_layers = _HEADER.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    kinds = {code: name for name, code in _KIND_CODES.items()}
    activations_by_code = {code: name for name, code in _ACTIVATION_CODES.items()}
    if kind_code not in kinds or n_layers == 0:
        raise ModelFormatError(f"{path}: corrupt header")
    if job_features is not None and features != job_features:
        raise ModelFormatError(f"{path}: model expects {features} job features, environment has {job_features}")
    if max_obsv_size is not None and obsv != max_obsv_size:
        raise ModelFormatError(f"{path}: model expects {obsv} observation slots, environment has {max_obsv_size}")

    offset = _HEADER.size
    shapes, activations = [], []
    for _ in range(n_layers):
        if offset + _LAYER.size > len(data):
            raise ModelFormatError(f"{path}: truncated layer table")
        out_dim, in_dim, act = _LAYER.unpack_from(data, offset)
        offset += _LAYER.size
        if act not in activations_by_code:
            raise ModelFormatError(f"{path}: unknown activation code {act}")
        shapes.append((out_dim, in_dim))
        activations.append(activations_by_code[act])

    count = sum(o * i + o for o, i in shapes)
    body = data[offset:]
    if len(body) != 4 * count:
        raise ModelFormatError(f"{path}: expected {count} parameters, found {len(body) // 4}")
    vector = np.frombuffer(body, dtype="<f4").astype(np.float64)

    weights = [np.zeros(shape) for shape in shapes]
    biases = [np.zeros(shape[0]) for shape in shapes]
    try:
        params = MlpParams(weights, biases, activations).with_flat(vector)
        if kinds[kind_code] == "policy":
            net: Network = PolicyNet(params, obsv)
            if net.job_features != features:
                raise ValueError("kernel input does not match the job feature count")
        else:
            net = ValueNet(params, obsv, features)
    except ValueError as e:
        raise ModelFormatError(f"{path}: {e}") from e
    return net

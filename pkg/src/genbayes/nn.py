"""Small deterministic feedforward network engine.

Everything is float64 numpy. Networks are plain lists of dense layers;
gradients are written out by hand, layer by layer, and can be checked
against central finite differences with :func:`grad_check`.

Batches are row-major: an input of shape ``(batch, in_dim)`` produces an
output of shape ``(batch, out_dim)``. A 1-D input is treated as a batch of
one and the trace remembers to squeeze it back.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid")
BCE_CLAMP = 1e-12


class DimensionError(ValueError):
    """Raised when array shapes do not line up."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where it must not."""


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "identity":
        return pre
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "tanh":
        return np.tanh(pre)
    if name == "sigmoid":
        return sigmoid(pre)
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the activation, evaluated from the trace.

    relu'(0) is taken as 0.
    """
    if name == "identity":
        return np.ones_like(pre)
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - post * post
    if name == "sigmoid":
        return post * (1.0 - post)
    raise ValueError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# layers and networks
# ---------------------------------------------------------------------------


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64, ndmin=1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"bias length {self.bias.shape} does not match weights {self.weights.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Mlp:
    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("an Mlp needs at least one layer")
        for k, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise DimensionError(
                    f"layer {k} outputs {a.out_dim} but layer {k + 1} expects {b.in_dim}"
                )

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        activations: str | Sequence[str],
        rng: np.random.Generator,
    ) -> "Mlp":
        """Glorot-uniform weights, zero biases.

        ``sizes`` lists every width including input and output. A single
        activation string applies to hidden layers and the output layer is
        left as identity.
        """
        n_layers = len(sizes) - 1
        if n_layers < 1:
            raise DimensionError("sizes needs at least an input and an output width")
        if isinstance(activations, str):
            activations = [activations] * (n_layers - 1) + ["identity"]
        if len(activations) != n_layers:
            raise DimensionError(f"{len(activations)} activations for {n_layers} layers")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(DenseLayer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Live references to every parameter array, in a fixed order."""
        params = {}
        for k, layer in enumerate(self.layers):
            params[f"{prefix}layer{k}.weights"] = layer.weights
            params[f"{prefix}layer{k}.bias"] = layer.bias
        return params

    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    def copy(self) -> "Mlp":
        return Mlp([DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers])


@dataclass
class ForwardTrace:
    """Everything backward needs: the input of each layer plus its pre- and
    post-activation values."""

    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]
    squeeze: bool = False
    shapes: tuple = ()

    @property
    def output(self) -> np.ndarray:
        out = self.post[-1]
        return out[0] if self.squeeze else out


@dataclass
class Gradients:
    weights: list[np.ndarray]
    bias: list[np.ndarray]
    input: np.ndarray

    def as_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        grads = {}
        for k, (gw, gb) in enumerate(zip(self.weights, self.bias)):
            grads[f"{prefix}layer{k}.weights"] = gw
            grads[f"{prefix}layer{k}.bias"] = gb
        return grads


def _layer_shapes(net: Mlp) -> tuple:
    return tuple((l.weights.shape, l.activation) for l in net.layers)


def forward(net: Mlp, x: np.ndarray) -> ForwardTrace:
    """Run ``x`` through ``net``; the net itself is not touched."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != net.in_dim:
        raise DimensionError(f"input has shape {x.shape}, network expects width {net.in_dim}")
    inputs, pre, post = [], [], []
    for layer in net.layers:
        inputs.append(h)
        a = h @ layer.weights.T + layer.bias
        h = activate(layer.activation, a)
        pre.append(a)
        post.append(h)
    return ForwardTrace(inputs, pre, post, squeeze, _layer_shapes(net))


def backward(net: Mlp, trace: ForwardTrace, grad_output: np.ndarray) -> Gradients:
    """Reverse pass. ``grad_output`` is d(loss)/d(output), shaped like the output."""
    if trace.shapes != _layer_shapes(net):
        raise DimensionError("trace was not produced by this network")
    g = np.asarray(grad_output, dtype=np.float64)
    if trace.squeeze and g.ndim == 1:
        g = g[None, :]
    if g.shape != trace.post[-1].shape:
        raise DimensionError(
            f"output gradient has shape {np.shape(grad_output)}, expected {trace.post[-1].shape}"
        )
    n_layers = len(net.layers)
    gw: list = [None] * n_layers
    gb: list = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        layer = net.layers[k]
        if layer.activation != "identity":
            g = g * activation_grad(layer.activation, trace.pre[k], trace.post[k])
        gw[k] = g.T @ trace.inputs[k]
        gb[k] = g.sum(axis=0)
        g = g @ layer.weights
    return Gradients(gw, gb, g[0] if trace.squeeze else g)


def predict(net: Mlp, x: np.ndarray) -> np.ndarray:
    return forward(net, x).output


# ---------------------------------------------------------------------------
# losses: each returns (mean loss, d loss / d prediction)
# ---------------------------------------------------------------------------


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def bce_loss(prob: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative Bernoulli log-likelihood of probabilities ``prob``.

    Probabilities are clamped to [1e-12, 1 - 1e-12].
    """
    p = np.clip(prob, BCE_CLAMP, 1.0 - BCE_CLAMP)
    value = -np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    grad = (-(target / p) + (1.0 - target) / (1.0 - p)) / p.size
    return float(value), grad


def pinball_loss(pred: np.ndarray, target: np.ndarray, q) -> tuple[float, np.ndarray]:
    """Mean of max(q e, (q - 1) e) with e = target - pred.

    At e == 0 the subgradient in e is taken to be q.
    """
    q = np.broadcast_to(np.asarray(q, dtype=np.float64), np.shape(pred))
    e = target - pred
    value = np.mean(np.maximum(q * e, (q - 1.0) * e))
    de = np.where(e >= 0.0, q, q - 1.0)
    return float(value), -de / e.size


def crossing_penalty(y: np.ndarray, y_quantile: np.ndarray, q) -> tuple[float, np.ndarray]:
    """Hinge penalty for quantile predictions on the wrong side of the data.

    Lower levels (q < 0.5) are penalised for sitting above y, upper levels
    (q > 0.5) for sitting below it; q == 0.5 is never penalised.
    """
    q = np.broadcast_to(np.asarray(q, dtype=np.float64), np.shape(y_quantile))
    lower = q < 0.5
    upper = q > 0.5
    above = y_quantile - y
    value = np.where(lower, np.maximum(above, 0.0), 0.0) + np.where(upper, np.maximum(-above, 0.0), 0.0)
    grad = np.where(lower & (above > 0.0), 1.0, 0.0) - np.where(upper & (above < 0.0), 1.0, 0.0)
    return float(np.mean(value)), grad / value.size


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def grad_check(net: Mlp, loss: LossFn, x: np.ndarray, step: float = 1e-5) -> float:
    """Largest relative gap between backprop and central differences.

    ``loss`` maps the network output to (value, d value / d output). The
    relative error per coordinate is |a - n| / max(1, |a| + |n|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    trace = forward(net, x)
    _, g_out = loss(trace.output)
    analytic = backward(net, trace, g_out).as_dict()
    worst = 0.0
    for name, param in net.parameters().items():
        a_grad = analytic[name]
        if not np.all(np.isfinite(a_grad)):
            raise NonFiniteError(f"analytic gradient of {name} is not finite")
        flat = param.reshape(-1)
        a_flat = a_grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss(predict(net, x))[0]
            flat[i] = orig - step
            down = loss(predict(net, x))[0]
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            if not np.isfinite(numeric):
                raise NonFiniteError(f"numeric gradient of {name}[{i}] is not finite")
            err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 20
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    grad_clip: float | None = None
    lr_final_frac: float = 1.0  # cosine decay to this fraction of learning_rate; 1.0 keeps it constant
    weight_decay: float = 0.0  # decoupled, applied to weight matrices only

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive when set")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 < self.lr_final_frac <= 1:
            raise ValueError("lr_final_frac must be in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch under the cosine schedule."""
        if self.lr_final_frac == 1.0 or self.epochs == 1:
            return self.learning_rate
        frac = (epoch - 1) / (self.epochs - 1)
        floor = self.lr_final_frac
        return self.learning_rate * (floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * frac)))


@dataclass
class OptState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self, prefix: str = "opt.") -> dict[str, np.ndarray]:
        arrays = {f"{prefix}step": np.array([self.step], dtype=np.int64)}
        for name in self.m:
            arrays[f"{prefix}m.{name}"] = self.m[name]
            arrays[f"{prefix}v.{name}"] = self.v[name]
        return arrays

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "opt.") -> "OptState":
        state = cls(int(arrays[f"{prefix}step"][0]))
        for key, value in arrays.items():
            if key.startswith(f"{prefix}m."):
                state.m[key[len(prefix) + 2:]] = value.copy()
            elif key.startswith(f"{prefix}v."):
                state.v[key[len(prefix) + 2:]] = value.copy()
        return state


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    config: TrainConfig,
    state: OptState | None = None,
    lr: float | None = None,
) -> tuple[dict[str, np.ndarray], OptState]:
    """One SGD or Adam update, applied in place to ``params``.

    ``lr`` overrides the configured learning rate (used by schedules).
    """
    state = state or OptState()
    lr = config.learning_rate if lr is None else lr
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise DimensionError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    if config.grad_clip is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > config.grad_clip:
            scale = config.grad_clip / norm
            grads = {k: g * scale for k, g in grads.items()}

    state.step += 1
    if config.weight_decay:
        for name in grads:
            if name.endswith("weights"):
                params[name] *= 1.0 - lr * config.weight_decay
    if config.optimizer == "sgd":
        for name, g in grads.items():
            params[name] -= lr * g
        return params, state

    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return params, state


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for (seed, keys...), independent of call order."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_state_array(rng: np.random.Generator) -> np.ndarray:
    state = json.dumps(rng.bit_generator.state, sort_keys=True)
    return np.frombuffer(state.encode(), dtype=np.uint8).copy()


def rng_from_state_array(arr: np.ndarray) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = json.loads(bytes(arr.astype(np.uint8)).decode())
    return rng


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"GBCKPT\x00\x00"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON metadata dict.

    Layout: magic, version (u32), header length (u64), UTF-8 JSON header,
    then each array's raw little-endian bytes in header order. No
    timestamps, so identical content gives identical bytes.
    """
    entries = []
    payload = io.BytesIO()
    for name in arrays:
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<")
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape), "nbytes": len(raw)})
        payload.write(raw)
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    offset = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", blob, offset)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset += struct.calcsize("<IQ")
    header = json.loads(blob[offset:offset + hlen].decode())
    offset += hlen
    arrays = {}
    for entry in header["arrays"]:
        raw = blob[offset:offset + entry["nbytes"]]
        offset += entry["nbytes"]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def mlp_to_arrays(net: Mlp, prefix: str) -> tuple[dict[str, np.ndarray], list[str]]:
    return net.parameters(prefix + "."), net.activations()


def mlp_from_arrays(arrays: dict[str, np.ndarray], prefix: str, activations: list[str]) -> Mlp:
    layers = []
    for k, act in enumerate(activations):
        layers.append(
            DenseLayer(arrays[f"{prefix}.layer{k}.weights"], arrays[f"{prefix}.layer{k}.bias"], act)
        )
    return Mlp(layers)

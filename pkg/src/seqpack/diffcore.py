"""Minimal differentiable-network substrate: named float64 parameter tensors,
MLP forward/backward with hand-derived gradients, Adam updates with freeze
masks, and JSON checkpoints that round-trip bit-exactly."""

from __future__ import annotations

import fnmatch
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1

ACTIVATIONS = ("tanh", "identity")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) so its full state is checkpointable."""
    return np.random.Generator(np.random.Philox(int(seed)))


def rng_state_payload(rng: np.random.Generator) -> dict:
    """Serialize a Philox generator to plain ints for JSON embedding."""
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "counter": [int(v) for v in st["state"]["counter"]],
        "key": [int(v) for v in st["state"]["key"]],
        "buffer": [int(v) for v in st["buffer"]],
        "buffer_pos": int(st["buffer_pos"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def restore_rng(payload: dict) -> np.random.Generator:
    if payload.get("bit_generator") != "Philox":
        raise ValueError(f"unsupported rng kind: {payload.get('bit_generator')!r}")
    rng = np.random.Generator(np.random.Philox(0))
    rng.bit_generator.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(payload["counter"], dtype=np.uint64),
            "key": np.array(payload["key"], dtype=np.uint64),
        },
        "buffer": np.array(payload["buffer"], dtype=np.uint64),
        "buffer_pos": int(payload["buffer_pos"]),
        "has_uint32": int(payload["has_uint32"]),
        "uinteger": int(payload["uinteger"]),
    }
    return rng


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including the input width, tanh hidden layers, identity output."""

    widths: tuple[int, ...]
    hidden_activation: str = "tanh"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs at least one layer (two widths)")
        if any(int(w) <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def to_json(self) -> dict:
        return {"widths": list(self.widths), "hidden_activation": self.hidden_activation}

    @staticmethod
    def from_json(doc: dict) -> "MlpSpec":
        return MlpSpec(tuple(doc["widths"]), doc.get("hidden_activation", "tanh"))


class ParamSet:
    """Named float64 tensors with matching gradient buffers and trainable flags."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def register(self, name: str, value: np.ndarray, trainable: bool = True) -> None:
        if name in self._values:
            raise ValueError(f"parameter {name!r} already registered")
        arr = np.array(value, dtype=np.float64)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        self._trainable[name] = bool(trainable)

    def names(self) -> list[str]:
        return list(self._values)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def value(self, name: str) -> np.ndarray:
        if name not in self._values:
            raise KeyError(f"unknown parameter {name!r}")
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        if name not in self._values:
            raise KeyError(f"unknown parameter {name!r}")
        self._trainable[name] = bool(flag)

    def add_grad(self, name: str, delta: np.ndarray) -> None:
        buf = self._grads[name]
        if buf.shape != np.shape(delta):
            raise ValueError(
                f"gradient shape {np.shape(delta)} does not match parameter "
                f"{name!r} shape {buf.shape}"
            )
        buf += delta

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def set_value(self, name: str, value: np.ndarray) -> None:
        cur = self.value(name)
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != cur.shape:
            raise ValueError(
                f"tensor {name!r}: shape {list(arr.shape)} does not match "
                f"registered shape {list(cur.shape)}"
            )
        self._values[name] = arr.copy()
        self._grads[name] = np.zeros_like(arr)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_mlp(params: ParamSet, spec: MlpSpec, prefix: str, rng: np.random.Generator) -> None:
    """Register weight/bias tensors '{prefix}.W{i}' / '{prefix}.b{i}' for each layer."""
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        params.register(f"{prefix}.W{i}", glorot_uniform(rng, fan_in, fan_out, (fan_in, fan_out)))
        params.register(f"{prefix}.b{i}", np.zeros(fan_out))


@dataclass
class MlpCache:
    """Per-layer inputs and activated outputs kept for the backward pass."""

    spec: MlpSpec
    prefix: str
    inputs: list[np.ndarray]
    activated: list[np.ndarray]
    squeeze: bool


def mlp_forward(
    spec: MlpSpec, params: ParamSet, x: np.ndarray, prefix: str
) -> tuple[np.ndarray, MlpCache]:
    """Forward pass; accepts a single vector or a (batch, width) matrix."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_width:
        raise ValueError(
            f"{prefix}: layer 0 expects input width {spec.input_width}, "
            f"got shape {list(np.shape(x))}"
        )
    inputs, activated = [], []
    h = x
    for i in range(spec.n_layers):
        inputs.append(h)
        pre = h @ params.value(f"{prefix}.W{i}") + params.value(f"{prefix}.b{i}")
        if i < spec.n_layers - 1 and spec.hidden_activation == "tanh":
            h = np.tanh(pre)
        else:
            h = pre
        activated.append(h)
    cache = MlpCache(spec, prefix, inputs, activated, squeeze)
    out = h[0] if squeeze else h
    return out, cache


def mlp_backward(cache: MlpCache, upstream_grad: np.ndarray, params: ParamSet) -> np.ndarray:
    """Accumulate parameter gradients (adds into buffers) and return d(input)."""
    if cache is None:
        raise ValueError("mlp_backward requires the forward cache")
    spec, prefix = cache.spec, cache.prefix
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.activated[-1].shape:
        raise ValueError(
            f"{prefix}: upstream gradient shape {list(np.shape(upstream_grad))} does not "
            f"match output shape {list(cache.activated[-1].shape)}"
        )
    for i in reversed(range(spec.n_layers)):
        if i < spec.n_layers - 1 and spec.hidden_activation == "tanh":
            a = cache.activated[i]
            g = g * (1.0 - a * a)
        x = cache.inputs[i]
        params.add_grad(f"{prefix}.W{i}", x.T @ g)
        params.add_grad(f"{prefix}.b{i}", g.sum(axis=0))
        g = g @ params.value(f"{prefix}.W{i}").T
    return g[0] if cache.squeeze else g


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name, plus a shared step counter."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def make_optimizer(
    params: ParamSet,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> OptimizerState:
    opt = OptimizerState(learning_rate, beta1, beta2, epsilon)
    for name in params.names():
        opt.first_moment[name] = np.zeros_like(params.value(name))
        opt.second_moment[name] = np.zeros_like(params.value(name))
    return opt


def optimizer_step(params: ParamSet, opt: OptimizerState) -> bool:
    """Apply one Adam update to trainable parameters and zero all gradients.

    Returns False (and leaves parameters, moments, and the step counter
    untouched) when any trainable gradient is non-finite; gradient buffers
    are cleared either way so the next accumulation starts clean.
    """
    trainable = [n for n in params.names() if params.trainable(n)]
    for name in trainable:
        if not np.isfinite(params.grad(name)).all():
            params.zero_grads()
            return False
    opt.step_count += 1
    t = opt.step_count
    bias1 = 1.0 - opt.beta1**t
    bias2 = 1.0 - opt.beta2**t
    for name in trainable:
        g = params.grad(name)
        m = opt.first_moment.setdefault(name, np.zeros_like(g))
        v = opt.second_moment.setdefault(name, np.zeros_like(g))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        update = opt.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + opt.epsilon)
        params.value(name)[...] -= update
    params.zero_grads()
    return True


def set_freeze_mask(params: ParamSet, mask) -> None:
    """Freeze parameters matching any fnmatch pattern; everything else trains.

    A pattern matching zero parameters is rejected so strategy-config typos
    fail loudly instead of silently training a supposedly frozen tensor.
    """
    names = params.names()
    frozen: set[str] = set()
    for pattern in mask:
        hits = fnmatch.filter(names, pattern)
        if not hits:
            raise ValueError(f"freeze pattern {pattern!r} matches no parameters")
        frozen.update(hits)
    for name in names:
        params.set_trainable(name, name not in frozen)


def _encode_tensors(values: dict) -> dict:
    return {
        name: {"shape": list(arr.shape), "data": np.asarray(arr, dtype=np.float64).ravel().tolist()}
        for name, arr in values.items()
    }


def save_params(
    params: ParamSet,
    path,
    spec: dict | None = None,
    optimizer: OptimizerState | None = None,
    rng_state: dict | None = None,
) -> None:
    """Write a checkpoint; json float repr gives full round-trip precision."""
    doc: dict = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": spec,
        "tensors": _encode_tensors({n: params.value(n) for n in params.names()}),
    }
    if optimizer is not None:
        doc["optimizer"] = {
            "learning_rate": optimizer.learning_rate,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "epsilon": optimizer.epsilon,
            "step_count": optimizer.step_count,
            "first_moment": _encode_tensors(optimizer.first_moment),
            "second_moment": _encode_tensors(optimizer.second_moment),
        }
    if rng_state is not None:
        doc["rng_state"] = rng_state
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def _decode_tensor(name: str, entry: dict, expected_shape) -> np.ndarray:
    shape = tuple(entry["shape"])
    if expected_shape is not None and shape != tuple(expected_shape):
        raise ValueError(
            f"tensor {name!r}: checkpoint shape {list(shape)} does not match "
            f"registered shape {list(expected_shape)}"
        )
    arr = np.array(entry["data"], dtype=np.float64)
    if arr.size != int(np.prod(shape, dtype=int)):
        raise ValueError(f"tensor {name!r}: data length {arr.size} does not match shape {list(shape)}")
    return arr.reshape(shape)


def load_params(params: ParamSet, path, optimizer: OptimizerState | None = None) -> dict:
    """Load a checkpoint into an already-shaped ParamSet.

    The first tensor whose shape disagrees with the registered parameter (or
    that is missing on either side) is named in the raised error. Returns the
    checkpoint metadata (spec, rng_state) for the caller.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt checkpoint {path}: {exc}") from exc
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    tensors = doc.get("tensors", {})
    for name in sorted(params.names()):
        if name not in tensors:
            raise ValueError(f"tensor {name!r} missing from checkpoint")
    for name in sorted(tensors):
        if name not in params:
            raise ValueError(f"tensor {name!r} in checkpoint is not a registered parameter")
    for name in params.names():
        params.set_value(name, _decode_tensor(name, tensors[name], params.value(name).shape))
    if optimizer is not None and "optimizer" in doc:
        enc = doc["optimizer"]
        optimizer.learning_rate = float(enc["learning_rate"])
        optimizer.beta1 = float(enc["beta1"])
        optimizer.beta2 = float(enc["beta2"])
        optimizer.epsilon = float(enc["epsilon"])
        optimizer.step_count = int(enc["step_count"])
        optimizer.first_moment = {
            n: _decode_tensor(n, e, None) for n, e in enc["first_moment"].items()
        }
        optimizer.second_moment = {
            n: _decode_tensor(n, e, None) for n, e in enc["second_moment"].items()
        }
    return {"spec": doc.get("spec"), "rng_state": doc.get("rng_state")}

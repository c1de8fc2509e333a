"""Feed-forward ReLU networks: the model class every other module consumes.

A network is a chain of dense layers, ReLU on every hidden layer and a linear
final layer. Weights are plain float64 numpy arrays and instances are frozen,
so networks can be shared freely across worker processes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "linear")


class NetworkError(ValueError):
    """Malformed network structure or serialized form."""


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray  # (out, in), row per output neuron
    bias: np.ndarray  # (out,)
    activation: str

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2:
            raise NetworkError(f"weights must be 2-D, got shape {w.shape}")
        if b.shape[0] != w.shape[0]:
            raise NetworkError(f"bias length {b.shape[0]} != {w.shape[0]} output rows")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NetworkError("weights and bias must be finite")
        if self.activation not in ACTIVATIONS:
            raise NetworkError(f"unknown activation {self.activation!r}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class Network:
    name: str
    input_dim: int
    layers: tuple[Layer, ...]

    def __post_init__(self) -> None:
        if not isinstance(self.name, str) or not self.name:
            raise NetworkError("network name must be a nonempty string")
        if self.input_dim <= 0:
            raise NetworkError("input_dim must be positive")
        layers = tuple(self.layers)
        if not layers:
            raise NetworkError("network needs at least one layer")
        prev = self.input_dim
        for i, layer in enumerate(layers):
            if layer.in_dim != prev:
                raise NetworkError(f"layer {i}: expects {layer.in_dim} inputs, gets {prev}")
            prev = layer.out_dim
        for i, layer in enumerate(layers[:-1]):
            if layer.activation != "relu":
                raise NetworkError(f"layer {i}: hidden layers must be relu")
        if layers[-1].activation != "linear":
            raise NetworkError("final layer must be linear")
        object.__setattr__(self, "layers", layers)

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def relu_count(self) -> int:
        return sum(layer.out_dim for layer in self.layers[:-1])


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Evaluate the network at a single point; returns shape (output_dim,)."""
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape[0] != net.input_dim:
        raise NetworkError(f"input has {v.shape[0]} components, expected {net.input_dim}")
    for layer in net.layers:
        v = layer.weights @ v + layer.bias
        if layer.activation == "relu":
            v = np.maximum(v, 0.0)
    return v


def forward_many(net: Network, xs: np.ndarray) -> np.ndarray:
    """Evaluate a batch of points, shape (n, input_dim) -> (n, output_dim)."""
    v = np.asarray(xs, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != net.input_dim:
        raise NetworkError(f"batch shape {v.shape} incompatible with input_dim {net.input_dim}")
    for layer in net.layers:
        v = v @ layer.weights.T + layer.bias
        if layer.activation == "relu":
            v = np.maximum(v, 0.0)
    return v


def forward_preacts(net: Network, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Evaluate one point and keep each layer's pre-activation vector.

    Attack gradients and stability checks both need the pre-activation signs.
    """
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape[0] != net.input_dim:
        raise NetworkError(f"input has {v.shape[0]} components, expected {net.input_dim}")
    preacts: list[np.ndarray] = []
    for layer in net.layers:
        z = layer.weights @ v + layer.bias
        preacts.append(z)
        v = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return preacts, v


def to_json(net: Network) -> dict:
    return {
        "name": net.name,
        "input_dim": net.input_dim,
        "layers": [
            {
                "weights": [[float(w) for w in row] for row in layer.weights],
                "bias": [float(b) for b in layer.bias],
                "activation": layer.activation,
            }
            for layer in net.layers
        ],
    }


def from_json(obj: dict) -> Network:
    if not isinstance(obj, dict):
        raise NetworkError("network JSON must be an object")
    missing = {"name", "input_dim", "layers"} - set(obj)
    if missing:
        raise NetworkError(f"network JSON missing keys: {sorted(missing)}")
    raw_layers = obj["layers"]
    if not isinstance(raw_layers, list) or not raw_layers:
        raise NetworkError("'layers' must be a nonempty list")
    layers = []
    for i, entry in enumerate(raw_layers):
        if not isinstance(entry, dict):
            raise NetworkError(f"layer {i}: expected an object")
        try:
            layers.append(
                Layer(
                    np.asarray(entry["weights"], dtype=np.float64),
                    np.asarray(entry["bias"], dtype=np.float64),
                    entry.get("activation", "relu"),
                )
            )
        except KeyError as exc:
            raise NetworkError(f"layer {i}: missing {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise NetworkError(f"layer {i}: {exc}") from None
    try:
        return Network(str(obj["name"]), int(obj["input_dim"]), tuple(layers))
    except (TypeError, ValueError) as exc:
        raise NetworkError(str(exc)) from None


def load_network(path) -> Network:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise NetworkError(f"{path}: invalid JSON ({exc})") from None
    try:
        return from_json(obj)
    except NetworkError as exc:
        raise NetworkError(f"{path}: {exc}") from None


def save_network(net: Network, path) -> None:
    Path(path).write_text(json.dumps(to_json(net), indent=2, sort_keys=True) + "\n")


def _padded_layers(net: Network, depth: int) -> list[Layer]:
    """Extend a network to `depth` layers without changing its function.

    The final affine map W,b is split into ReLU(Wx+b) and ReLU(-Wx-b); both
    halves are nonnegative, so identity ReLU layers carry them losslessly and
    a final [I | -I] linear layer recombines them exactly (p - q == Wx + b in
    float arithmetic, since one of p, q is always zero).
    """
    extra = depth - net.depth
    if extra == 0:
        return list(net.layers)
    last = net.layers[-1]
    m = last.out_dim
    split = Layer(
        np.vstack([last.weights, -last.weights]),
        np.concatenate([last.bias, -last.bias]),
        "relu",
    )
    carry = [Layer(np.eye(2 * m), np.zeros(2 * m), "relu") for _ in range(extra - 1)]
    recombine = Layer(np.hstack([np.eye(m), -np.eye(m)]), np.zeros(m), "linear")
    return list(net.layers[:-1]) + [split] + carry + [recombine]


def concat(a: Network, b: Network, name: str | None = None) -> Network:
    """Stack two networks over a shared input: forward(concat(a,b), x) == a(x) ++ b(x).

    The first layer stacks rows; deeper layers go block-diagonal. Unequal
    depths are padded first (see _padded_layers).
    """
    if a.input_dim != b.input_dim:
        raise NetworkError(f"input dims differ: {a.input_dim} vs {b.input_dim}")
    depth = max(a.depth, b.depth)
    la = _padded_layers(a, depth)
    lb = _padded_layers(b, depth)
    layers = []
    for i, (p, q) in enumerate(zip(la, lb)):
        bias = np.concatenate([p.bias, q.bias])
        if i == 0:
            w = np.vstack([p.weights, q.weights])
        else:
            w = np.zeros((p.out_dim + q.out_dim, p.in_dim + q.in_dim))
            w[: p.out_dim, : p.in_dim] = p.weights
            w[p.out_dim :, p.in_dim :] = q.weights
        layers.append(Layer(w, bias, p.activation))
    return Network(name or f"{a.name}++{b.name}", a.input_dim, tuple(layers))

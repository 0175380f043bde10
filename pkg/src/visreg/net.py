"""Small feedforward networks with hand-written reverse-mode gradients.

Everything here works on batches: inputs have a leading batch axis, dense
layers see ``(N, d)`` and conv layers see ``(N, C, H, W)``.  A dense layer
that follows a conv layer flattens its input.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(ValueError):
    pass


@dataclass
class Layer:
    kind: str  # "dense" | "conv"
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"
    stride: int = 1

    @property
    def out_features(self) -> int:
        return self.W.shape[0]


Gradient = list  # list of (dW, db) pairs, one per layer


@dataclass
class Network:
    layers: list[Layer]
    input_shape: tuple[int, ...]
    feature_layer_index: int
    seed: int | None = None

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        n = len(self.layers)
        if not -n <= self.feature_layer_index < n:
            raise ValueError(f"feature_layer_index {self.feature_layer_index} out of range")
        if self.feature_layer_index < 0:
            self.feature_layer_index += n
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_features

    def copy(self) -> "Network":
        layers = [Layer(l.kind, l.W.copy(), l.b.copy(), l.activation, l.stride) for l in self.layers]
        return Network(layers, self.input_shape, self.feature_layer_index, self.seed)

    def zeros_like(self) -> Gradient:
        return [(np.zeros_like(l.W), np.zeros_like(l.b)) for l in self.layers]

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.W.ravel(), l.b.ravel()]) for l in self.layers])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for l in self.layers:
            for arr in (l.W, l.b):
                arr[...] = vec[i:i + arr.size].reshape(arr.shape)
                i += arr.size
        if i != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, network has {i}")

    @property
    def n_params(self) -> int:
        return sum(l.W.size + l.b.size for l in self.layers)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x).output

    def architecture(self) -> list[dict]:
        out = []
        for l in self.layers:
            d = {"kind": l.kind, "activation": l.activation}
            if l.kind == "dense":
                d["units"] = l.W.shape[0]
            else:
                d.update(filters=l.W.shape[0], kernel=l.W.shape[2], stride=l.stride)
            out.append(d)
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for l in self.layers:
            h.update(np.ascontiguousarray(l.W, dtype=np.float64).tobytes())
            h.update(np.ascontiguousarray(l.b, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


def build_network(input_shape, arch: list[dict], rng: np.random.Generator,
                  feature_layer_index: int = -2, seed: int | None = None) -> Network:
    """Build a network from layer dicts.

    Dense dicts need ``units``; conv dicts need ``filters``, ``kernel`` and
    optionally ``stride``.  Weights use Glorot-uniform init, biases start at 0.
    """
    shape = tuple(int(d) for d in input_shape)
    layers = []
    for i, spec in enumerate(arch):
        kind = spec["kind"]
        act = spec.get("activation", "identity")
        if kind == "conv":
            if len(shape) != 3:
                raise ShapeError(f"layer {i}: conv needs (C, H, W) input, got {shape}")
            c, h, w = shape
            k, s, f = int(spec["kernel"]), int(spec.get("stride", 1)), int(spec["filters"])
            if k > h or k > w:
                raise ShapeError(f"layer {i}: kernel {k} larger than input {h}x{w}")
            fan_in, fan_out = c * k * k, f * k * k
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-lim, lim, size=(f, c, k, k))
            layers.append(Layer("conv", W, np.zeros(f), act, s))
            shape = (f, (h - k) // s + 1, (w - k) // s + 1)
        elif kind == "dense":
            fan_in, units = int(np.prod(shape)), int(spec["units"])
            lim = np.sqrt(6.0 / (fan_in + units))
            W = rng.uniform(-lim, lim, size=(units, fan_in))
            layers.append(Layer("dense", W, np.zeros(units), act))
            shape = (units,)
        else:
            raise ValueError(f"layer {i}: unknown kind {kind!r}")
    return Network(layers, tuple(input_shape), feature_layer_index, seed)


def mlp(sizes: list[int], rng: np.random.Generator, hidden_activation="tanh",
        feature_layer_index: int = -2, seed: int | None = None) -> Network:
    arch = [{"kind": "dense", "units": n, "activation": hidden_activation} for n in sizes[1:-1]]
    arch.append({"kind": "dense", "units": sizes[-1], "activation": "identity"})
    return build_network((sizes[0],), arch, rng, feature_layer_index, seed)


# --- forward / backward -----------------------------------------------------

def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a, g):
    if name == "relu":
        return g * (z > 0)
    if name == "tanh":
        return g * (1.0 - a * a)
    return g


def _im2col(x, k, s):
    # x: (N, C, H, W) -> (C*k*k, N*Ho*Wo); this layout keeps the BLAS calls wide
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    return cols, ho, wo


@dataclass
class LayerTrace:
    x: np.ndarray          # input as the layer saw it (flattened for dense)
    z: np.ndarray          # pre-activation
    a: np.ndarray          # activation, before dropout
    h: np.ndarray          # output passed on (after dropout)
    mask: np.ndarray | None = None
    cols: np.ndarray | None = None
    in_shape: tuple = ()


@dataclass
class ForwardTrace:
    layers: list[LayerTrace] = field(default_factory=list)
    single: bool = False

    @property
    def output(self) -> np.ndarray:
        out = self.layers[-1].h
        return out[0] if self.single else out


def forward(net: Network, x, dropout_rate: float = 0.0,
            rng: np.random.Generator | None = None) -> ForwardTrace:
    """Evaluate the network and keep everything backward needs.

    An unbatched input (shape == ``net.input_shape``) gives an unbatched
    output. Dropout hits dense hidden layers only and is inverted (scaled
    by ``1/(1-p)`` at train time).
    """
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == net.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"layer 0: expected input shape {net.input_shape}, got {x.shape[1:]}")
    if dropout_rate > 0 and rng is None:
        raise ValueError("dropout needs an rng")

    trace = ForwardTrace(single=single)
    last = len(net.layers) - 1
    h = x
    for i, layer in enumerate(net.layers):
        in_shape = h.shape
        cols = None
        if layer.kind == "conv":
            if h.ndim != 4 or h.shape[1] != layer.W.shape[1]:
                raise ShapeError(f"layer {i} (conv): expected {layer.W.shape[1]} input channels, got shape {h.shape[1:]}")
            k = layer.W.shape[2]
            cols, ho, wo = _im2col(h, k, layer.stride)
            z = layer.W.reshape(layer.W.shape[0], -1) @ cols + layer.b[:, None]
            z = z.reshape(-1, h.shape[0], ho, wo).transpose(1, 0, 2, 3)
            inp = h
        else:
            inp = h.reshape(h.shape[0], -1)
            if inp.shape[1] != layer.W.shape[1]:
                raise ShapeError(f"layer {i} (dense): expected {layer.W.shape[1]} inputs, got {inp.shape[1]}")
            z = inp @ layer.W.T + layer.b
        a = _act(layer.activation, z)
        mask = None
        if dropout_rate > 0 and layer.kind == "dense" and i != last:
            mask = (rng.random(a.shape) >= dropout_rate) / (1.0 - dropout_rate)
            out = a * mask
        else:
            out = a
        trace.layers.append(LayerTrace(inp, z, a, out, mask, cols, in_shape))
        h = out
    return trace


def feature(trace: ForwardTrace, net: Network) -> np.ndarray:
    f = trace.layers[net.feature_layer_index].h
    f = f.reshape(f.shape[0], -1)
    return f[0] if trace.single else f


def backward(trace: ForwardTrace, net: Network, output_cotangent,
             feature_cotangent=None) -> Gradient:
    """Gradient of <g_out, output> + <g_feat, feature> w.r.t. all parameters."""
    g = np.asarray(output_cotangent, dtype=np.float64)
    out_shape = trace.layers[-1].h.shape
    if trace.single:
        g = g[None]
    if g.shape != out_shape:
        raise ShapeError(f"output cotangent shape {g.shape} != output shape {out_shape}")
    gf = None
    if feature_cotangent is not None:
        gf = np.asarray(feature_cotangent, dtype=np.float64)
        if trace.single:
            gf = gf[None]
        fshape = trace.layers[net.feature_layer_index].h.shape
        if gf.shape != (fshape[0], int(np.prod(fshape[1:]))):
            raise ShapeError(f"feature cotangent shape {gf.shape} does not match feature layer {fshape}")
        gf = gf.reshape(fshape)

    grads: Gradient = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer, lt = net.layers[i], trace.layers[i]
        if i == net.feature_layer_index and gf is not None:
            g = g + gf
        if lt.mask is not None:
            g = g * lt.mask
        gz = _act_grad(layer.activation, lt.z, lt.a, g)
        if layer.kind == "dense":
            dW = gz.T @ lt.x
            db = gz.sum(axis=0)
            if i > 0:
                g = (gz @ layer.W).reshape(lt.in_shape)
        else:
            f, c, k, _ = layer.W.shape
            n, _, ho, wo = gz.shape
            gcol = gz.transpose(1, 0, 2, 3).reshape(f, -1)
            dW = (gcol @ lt.cols.T).reshape(layer.W.shape)
            db = gcol.sum(axis=1)
            if i > 0:
                dcols = (layer.W.reshape(f, -1).T @ gcol).reshape(c, k, k, n, ho, wo)
                dx = np.zeros(lt.in_shape)
                s = layer.stride
                for p in range(k):
                    for q in range(k):
                        dx[:, :, p:p + s * ho:s, q:q + s * wo:s] += dcols[:, p, q].transpose(1, 0, 2, 3)
                g = dx
        grads[i] = (dW, db)
    return grads


def add_grads(a: Gradient, b: Gradient) -> Gradient:
    return [(wa + wb, ba + bb) for (wa, ba), (wb, bb) in zip(a, b)]


def flat_grad(grad: Gradient) -> np.ndarray:
    return np.concatenate([np.concatenate([dW.ravel(), db.ravel()]) for dW, db in grad])


# --- optimizers ---------------------------------------------------------------

def sgd_step(net: Network, grad: Gradient, lr: float, weight_decay: float = 0.0) -> Network:
    if lr <= 0 or weight_decay < 0:
        raise ValueError("need lr > 0 and weight_decay >= 0")
    for layer, (dW, db) in zip(net.layers, grad):
        layer.W -= lr * (dW + weight_decay * layer.W)
        layer.b -= lr * (db + weight_decay * layer.b)
    return net


@dataclass
class AdamState:
    m: Gradient
    v: Gradient
    t: int = 0

    @classmethod
    def zeros(cls, net: Network) -> "AdamState":
        return cls(net.zeros_like(), net.zeros_like(), 0)


def adam_step(state: AdamState, net: Network, grad: Gradient, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> tuple[Network, AdamState]:
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for layer, (dW, db), m, v in zip(net.layers, grad, state.m, state.v):
        for p, g, mi, vi in ((layer.W, dW, m[0], v[0]), (layer.b, db, m[1], v[1])):
            if weight_decay:
                g = g + weight_decay * p
            mi *= beta1
            mi += (1.0 - beta1) * g
            vi *= beta2
            vi += (1.0 - beta2) * g * g
            p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
    return net, state


def softmax_logprob(logits) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return np.exp(logp), logp


# --- checkpoints -----------------------------------------------------------

def to_dict(net: Network) -> dict:
    return {
        "format": "visreg-network/1",
        "input_shape": list(net.input_shape),
        "architecture": net.architecture(),
        "feature_layer_index": net.feature_layer_index,
        "seed": net.seed,
        "params": [{"W": l.W.ravel().tolist(), "b": l.b.ravel().tolist()} for l in net.layers],
    }


def from_dict(d: dict) -> Network:
    rng = np.random.default_rng(0)
    net = build_network(d["input_shape"], d["architecture"], rng, d["feature_layer_index"], d.get("seed"))
    for layer, p in zip(net.layers, d["params"]):
        W = np.asarray(p["W"], dtype=np.float64)
        b = np.asarray(p["b"], dtype=np.float64)
        if W.size != layer.W.size or b.size != layer.b.size:
            raise ShapeError("checkpoint parameter count does not match architecture")
        layer.W[...] = W.reshape(layer.W.shape)
        layer.b[...] = b
    return net


def save(net: Network, path, extra: dict | None = None) -> None:
    doc = to_dict(net)
    if extra:
        doc["meta"] = extra
    Path(path).write_text(json.dumps(doc))


def load(path) -> Network:
    return from_dict(json.loads(Path(path).read_text()))

"""Small float64 feed-forward network engine with hand-written gradients.

Layers: 1-D convolution (valid padding), batch normalisation, ReLU, max
pooling, flatten, dense, inverted dropout and a final softmax paired with
cross-entropy.  Everything is functional: ``forward`` returns probabilities
and a cache, ``backward`` turns the cache into gradients, ``adam_step``
returns updated parameters and optimiser state.

Batches are shaped ``(n, channels, length)`` for convolutional stacks and
``(n, features)`` after flattening.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import InputError, NumericalError

BN_EPS = 1e-8
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class Conv1D:
    out_ch: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class BatchNorm:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    k: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out: int


@dataclass(frozen=True)
class Dropout:
    p: float


@dataclass(frozen=True)
class Softmax:
    pass


Layer = Union[Conv1D, BatchNorm, ReLU, MaxPool, Flatten, Dense, Dropout, Softmax]
_LAYER_TYPES = {cls.__name__: cls for cls in (Conv1D, BatchNorm, ReLU, MaxPool, Flatten,
                                              Dense, Dropout, Softmax)}


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()  # validates composition

    def shapes(self) -> list[tuple]:
        """Per-sample output shape after each layer (validates adjacency)."""
        shape = self.input_shape
        out = []
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise InputError("network must end with a softmax layer")
        for i, layer in enumerate(self.layers):
            bad = InputError(f"layer {i} ({type(layer).__name__}) incompatible with input shape {shape}")
            if isinstance(layer, Conv1D):
                if len(shape) != 2 or layer.kernel < 1 or layer.stride < 1 or shape[1] < layer.kernel:
                    raise bad
                shape = (layer.out_ch, (shape[1] - layer.kernel) // layer.stride + 1)
            elif isinstance(layer, MaxPool):
                if len(shape) != 2 or layer.k < 1 or shape[1] < layer.k:
                    raise bad
                shape = (shape[0], shape[1] // layer.k)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if len(shape) != 1 or layer.out < 1:
                    raise bad
                shape = (layer.out,)
            elif isinstance(layer, Dropout):
                if not 0.0 <= layer.p < 1.0:
                    raise InputError(f"dropout p must lie in [0, 1), got {layer.p}")
            elif isinstance(layer, Softmax):
                if len(shape) != 1 or i != len(self.layers) - 1:
                    raise bad
            elif not isinstance(layer, (BatchNorm, ReLU)):
                raise InputError(f"unknown layer {layer!r}")
            out.append(shape)
        return out

    @property
    def n_classes(self) -> int:
        return self.shapes()[-1][0]

    def to_json(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "layers": [{"type": type(l).__name__, **asdict(l)} for l in self.layers]}

    @classmethod
    def from_json(cls, data: dict) -> "NetworkSpec":
        layers = []
        for item in data["layers"]:
            item = dict(item)
            layers.append(_LAYER_TYPES[item.pop("type")](**item))
        return cls(tuple(data["input_shape"]), tuple(layers))

    def hash(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).digest()


@dataclass
class NetworkParams:
    """Per-layer arrays; trainable keys are W, b, gamma, beta."""
    layers: list = field(default_factory=list)
    training: bool = True

    def copy(self) -> "NetworkParams":
        return NetworkParams([{k: v.copy() for k, v in p.items()} for p in self.layers], self.training)

    def count(self) -> int:
        return sum(v.size for p in self.layers for k, v in p.items() if k in TRAINABLE)

    def __eq__(self, other):
        if not isinstance(other, NetworkParams) or len(self.layers) != len(other.layers):
            return False
        return all(a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
                   for a, b in zip(self.layers, other.layers))


TRAINABLE = ("W", "b", "gamma", "beta")
_KEY_ORDER = ("W", "b", "gamma", "beta", "running_mean", "running_var")


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> NetworkParams:
    """Kaiming-uniform (fan-in) weights, zero biases, unit batchnorm scale."""
    shape = spec.input_shape
    out = []
    for layer, next_shape in zip(spec.layers, spec.shapes()):
        p = {}
        if isinstance(layer, Conv1D):
            fan_in = shape[0] * layer.kernel
            bound = np.sqrt(6.0 / fan_in)
            p["W"] = rng.uniform(-bound, bound, (layer.out_ch, shape[0], layer.kernel))
            p["b"] = np.zeros(layer.out_ch)
        elif isinstance(layer, Dense):
            bound = np.sqrt(6.0 / shape[0])
            p["W"] = rng.uniform(-bound, bound, (shape[0], layer.out))
            p["b"] = np.zeros(layer.out)
        elif isinstance(layer, BatchNorm):
            c = shape[0]
            p.update(gamma=np.ones(c), beta=np.zeros(c), running_mean=np.zeros(c),
                     running_var=np.ones(c))
        out.append(p)
        shape = next_shape
    return NetworkParams(out, training=True)


def check_params(spec: NetworkSpec, params: NetworkParams) -> None:
    ref = init_params(spec, np.random.default_rng(0))
    if len(ref.layers) != len(params.layers):
        raise InputError("parameter layer count does not match network spec")
    for i, (a, b) in enumerate(zip(ref.layers, params.layers)):
        if a.keys() != b.keys() or any(a[k].shape != b[k].shape for k in a):
            raise InputError(f"parameter shapes of layer {i} do not match network spec")
        if "running_var" in b and np.any(b["running_var"] <= 0):
            raise InputError(f"layer {i} running variance must be positive")


# -- layer kernels ---------------------------------------------------------------------

def _windows(x, kernel, stride, lout):
    n, c, _ = x.shape
    s = x.strides
    return as_strided(x, (n, c, lout, kernel), (s[0], s[1], s[2] * stride, s[2]), writeable=False)


def _conv_forward(x, W, b, stride):
    o, c, k = W.shape
    lout = (x.shape[2] - k) // stride + 1
    cols = _windows(np.ascontiguousarray(x), k, stride, lout)  # (n, c, lout, k)
    cols = cols.transpose(0, 2, 1, 3).reshape(x.shape[0], lout, c * k)
    y = cols @ W.reshape(o, c * k).T + b  # (n, lout, o)
    return y.transpose(0, 2, 1), cols


def _conv_backward(dy, x_shape, cols, W, stride):
    o, c, k = W.shape
    n, _, lout = dy.shape
    dyt = dy.transpose(0, 2, 1)  # (n, lout, o)
    dW = (dyt.reshape(-1, o).T @ cols.reshape(-1, c * k)).reshape(o, c, k)
    db = dy.sum(axis=(0, 2))
    dcols = (dyt @ W.reshape(o, c * k)).reshape(n, lout, c, k)
    dx = np.zeros(x_shape)
    span = stride * (lout - 1) + 1
    for j in range(k):
        dx[:, :, j:j + span:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
    return dx, dW, db


def max_pool(x, k):
    """Non-overlapping max over windows of ``k`` (trailing remainder dropped).

    Returns (pooled, argmax within each window); the first maximum wins ties.
    """
    n, c, length = x.shape
    lout = length // k
    win = x[:, :, :lout * k].reshape(n, c, lout, k)
    arg = win.argmax(axis=-1)
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg


def _bn_axes(x):
    return (0, 2) if x.ndim == 3 else (0,)


def _bn_view(v, x):
    return v[None, :, None] if x.ndim == 3 else v[None, :]


# -- forward / backward ------------------------------------------------------------------

def forward(spec: NetworkSpec, params: NetworkParams, x, training: bool = False, rng=None):
    """Class probabilities for a batch and the cache needed by ``backward``.

    ``training=True`` uses batch statistics and inverted dropout (needs
    ``rng``) and updates the batchnorm running statistics in ``params``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise InputError(f"input shape {x.shape[1:]} does not match network input {spec.input_shape}")
    if training and rng is None and any(isinstance(l, Dropout) and l.p > 0 for l in spec.layers):
        raise InputError("training-mode forward with dropout needs an rng")
    caches = []
    for i, (layer, p) in enumerate(zip(spec.layers, params.layers)):
        cache = None
        if isinstance(layer, Conv1D):
            shape = x.shape
            x, cols = _conv_forward(x, p["W"], p["b"], layer.stride)
            cache = (shape, cols)
        elif isinstance(layer, Dense):
            cache = x
            x = x @ p["W"] + p["b"]
        elif isinstance(layer, BatchNorm):
            axes = _bn_axes(x)
            if training:
                mu = x.mean(axis=axes)
                var = x.var(axis=axes)
                m = x.size // x.shape[1]
                p["running_mean"] = (1 - BN_MOMENTUM) * p["running_mean"] + BN_MOMENTUM * mu
                unbiased = var * m / max(m - 1, 1)
                p["running_var"] = (1 - BN_MOMENTUM) * p["running_var"] + BN_MOMENTUM * unbiased
            else:
                mu, var = p["running_mean"], p["running_var"]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - _bn_view(mu, x)) * _bn_view(inv, x)
            cache = (xhat, inv)
            x = xhat * _bn_view(p["gamma"], x) + _bn_view(p["beta"], x)
        elif isinstance(layer, ReLU):
            cache = x > 0
            x = np.where(cache, x, 0.0)
        elif isinstance(layer, MaxPool):
            shape = x.shape
            x, arg = max_pool(x, layer.k)
            cache = (shape, arg)
        elif isinstance(layer, Flatten):
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dropout):
            if training and layer.p > 0:
                mask = (rng.random(x.shape) >= layer.p) / (1.0 - layer.p)
                cache = mask
                x = x * mask
        elif isinstance(layer, Softmax):
            z = x - x.max(axis=1, keepdims=True)
            e = np.exp(z)
            x = e / e.sum(axis=1, keepdims=True)
        if not training and not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite activations after layer {i} ({type(layer).__name__})")
        caches.append(cache)
    return x, {"training": training, "layers": caches, "probs": x}


def cross_entropy(probs, labels) -> float:
    labels = np.asarray(labels).astype(np.int64)
    picked = probs[np.arange(labels.size), labels]
    return float(-np.mean(np.log(np.maximum(picked, 1e-300))))


def backward(spec: NetworkSpec, params: NetworkParams, cache, labels):
    """Gradients of mean cross-entropy w.r.t. every trainable array."""
    if not cache.get("training"):
        raise InputError("backward needs the cache of a training-mode forward")
    labels = np.asarray(labels).astype(np.int64)
    probs = cache["probs"]
    n = probs.shape[0]
    if labels.shape != (n,):
        raise InputError("one label per batch row required")
    grads = [dict() for _ in spec.layers]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    d /= n
    for i in range(len(spec.layers) - 2, -1, -1):  # softmax handled above
        layer, p, c = spec.layers[i], params.layers[i], cache["layers"][i]
        if isinstance(layer, Conv1D):
            shape, cols = c
            d, grads[i]["W"], grads[i]["b"] = _conv_backward(d, shape, cols, p["W"], layer.stride)
        elif isinstance(layer, Dense):
            grads[i]["W"] = c.T @ d
            grads[i]["b"] = d.sum(axis=0)
            d = d @ p["W"].T
        elif isinstance(layer, BatchNorm):
            xhat, inv = c
            axes = _bn_axes(d)
            grads[i]["gamma"] = (d * xhat).sum(axis=axes)
            grads[i]["beta"] = d.sum(axis=axes)
            dxhat = d * _bn_view(p["gamma"], d)
            m = d.size // d.shape[1]
            d = _bn_view(inv, d) / m * (
                m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        elif isinstance(layer, ReLU):
            d = np.where(c, d, 0.0)
        elif isinstance(layer, MaxPool):
            shape, arg = c
            n_, ch, lout = arg.shape
            dx = np.zeros(shape)
            pos = np.arange(lout)[None, None, :] * layer.k + arg
            np.put_along_axis(dx, pos, d, axis=2)
            d = dx
        elif isinstance(layer, Flatten):
            d = d.reshape(c)
        elif isinstance(layer, Dropout):
            if c is not None:
                d = d * c
    return grads


# -- optimiser ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params: NetworkParams) -> AdamState:
    zeros = [{k: np.zeros_like(a) for k, a in p.items() if k in TRAINABLE} for p in params.layers]
    return AdamState(0, zeros, [{k: z.copy() for k, z in p.items()} for p in zeros])


def adam_step(params: NetworkParams, grads, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam; returns (new params, new state), inputs untouched."""
    for i, g in enumerate(grads):
        for k, a in g.items():
            if not np.all(np.isfinite(a)):
                raise NumericalError(f"non-finite gradient for {k} of layer {i}")
    t = state.step + 1
    new_p = params.copy()
    new_m, new_v = [], []
    for i, g in enumerate(grads):
        mi, vi = {}, {}
        for k in state.m[i]:
            gk = g.get(k, np.zeros_like(state.m[i][k]))
            mi[k] = beta1 * state.m[i][k] + (1 - beta1) * gk
            vi[k] = beta2 * state.v[i][k] + (1 - beta2) * gk * gk
            mhat = mi[k] / (1 - beta1 ** t)
            vhat = vi[k] / (1 - beta2 ** t)
            new_p.layers[i][k] = params.layers[i][k] - lr * mhat / (np.sqrt(vhat) + eps)
        new_m.append(mi)
        new_v.append(vi)
    return new_p, AdamState(t, new_m, new_v)


# -- sampling ----------------------------------------------------------------------------

class _Cycler:
    """Endless stream of indices: successive seeded permutations of a pool."""

    def __init__(self, pool, rng):
        self.pool, self.rng = pool, rng
        self.buf = np.empty(0, dtype=np.int64)

    def take(self, k):
        while self.buf.size < k:
            self.buf = np.concatenate([self.buf, self.rng.permutation(self.pool)])
        out, self.buf = self.buf[:k], self.buf[k:]
        return out


def weighted_batch_sampler(labels, batch_size: int, rng, n_batches: int | None = None):
    """Class-balanced index batches (counts per class differ by at most one).

    Each class is drawn from its own stream of reshuffled permutations, so the
    minority class repeats as needed.  Default batch count covers the dataset
    size once.
    """
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if pos.size == 0 or neg.size == 0:
        raise InputError("class-balanced sampling needs both classes present")
    if batch_size < 2:
        raise InputError("batch_size must be at least 2")
    if n_batches is None:
        n_batches = -(-labels.size // batch_size)
    streams = (_Cycler(neg, rng), _Cycler(pos, rng))
    out = []
    for b in range(n_batches):
        half = batch_size // 2
        extra = batch_size - 2 * half
        k1 = half + (extra if b % 2 else 0)
        k0 = batch_size - k1
        out.append(np.concatenate([streams[0].take(k0), streams[1].take(k1)]))
    return out


# -- persistence ---------------------------------------------------------------------------

NN_MAGIC = b"LUMITRACK-NN"
NN_VERSION = 1


def save_params(params: NetworkParams, spec: NetworkSpec) -> bytes:
    """Magic, version, spec hash, then every array (layer order, fixed key order)."""
    check_params(spec, params)
    arrays = [p[k] for p in params.layers for k in _KEY_ORDER if k in p]
    out = [NN_MAGIC, struct.pack("<I", NN_VERSION), spec.hash(), struct.pack("<I", len(arrays))]
    for a in arrays:
        out.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(out)


def load_params(blob: bytes, spec: NetworkSpec) -> NetworkParams:
    """Inverse of ``save_params``; any corruption or spec mismatch raises InputError."""
    def need(pos, n):
        if pos + n > len(blob):
            raise InputError("parameter file truncated")
        return blob[pos:pos + n]

    if need(0, len(NN_MAGIC)) != NN_MAGIC:
        raise InputError("not a parameter file (bad magic)")
    pos = len(NN_MAGIC)
    (version,) = struct.unpack("<I", need(pos, 4))
    if version != NN_VERSION:
        raise InputError(f"unsupported parameter file version {version}")
    found = need(pos + 4, 32)
    expected = spec.hash()
    if found != expected:
        raise InputError(f"network spec hash mismatch: expected {expected.hex()[:16]}, "
                         f"found {found.hex()[:16]}")
    pos += 36
    (count,) = struct.unpack("<I", need(pos, 4))
    pos += 4
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack("<I", need(pos, 4))
        shape = struct.unpack(f"<{ndim}Q", need(pos + 4, 8 * ndim))
        pos += 4 + 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays.append(np.frombuffer(need(pos, 8 * size), dtype="<f8").reshape(shape).astype(np.float64))
        pos += 8 * size
    if pos != len(blob):
        raise InputError("trailing bytes after parameter arrays")
    template = init_params(spec, np.random.default_rng(0))
    it = iter(arrays)
    layers = []
    try:
        for p in template.layers:
            layers.append({k: next(it) for k in _KEY_ORDER if k in p})
    except StopIteration:
        raise InputError("parameter file has too few arrays for this spec") from None
    if next(it, None) is not None:
        raise InputError("parameter file has too many arrays for this spec")
    params = NetworkParams(layers, training=False)
    check_params(spec, params)
    return params

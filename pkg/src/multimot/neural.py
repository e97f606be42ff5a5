"""Small ReLU perceptrons with hand-derived gradients, Adam and clipping.

Only what the dual potentials need: dense layers, ReLU hidden activations,
a scalar linear output, exact backward pass, global-norm clipping, Adam with
bias correction and a step-decay learning-rate schedule.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import StaleCacheError

CHECKPOINT_MAGIC = b"MMOTCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class Mlp:
    """``weights[l]`` has shape ``(out, in)``; ``biases[l]`` has shape ``(out,)``."""

    weights: list
    biases: list
    version: int = 0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {l}: weight {w.shape} and bias {b.shape} do not match")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l} input {w.shape[1]} != previous output {self.weights[l - 1].shape[0]}")
        if self.weights[-1].shape[0] != 1:
            raise ValueError("final layer must have a single output")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    def params(self) -> list:
        """Flat list ``[W_0, b_0, W_1, b_1, ...]`` (views, not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.version)


def init_mlp(sizes, rng: np.random.Generator) -> Mlp:
    """He-uniform weights ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases)


def hidden_sizes(d: int) -> list[int]:
    """Two hidden layers of width 10K with K = min(10 d, 80)."""
    width = 10 * min(10 * d, 80)
    return [width, width]


@dataclass
class ForwardCache:
    inputs: list  # activations entering each layer
    pre: list  # pre-activations of the hidden layers
    version: int
    owner: int


def mlp_forward(params: Mlp, batch):
    """Return ``(outputs of shape (b,), cache)``."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != params.input_dim:
        raise ValueError(f"input width {x.shape[1]} != network input {params.input_dim}")
    inputs, pre = [], []
    h = x
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w.T + b
        if l < last:
            pre.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
    return h[:, 0], ForwardCache(inputs, pre, params.version, id(params))


def mlp_backward(params: Mlp, cache: ForwardCache, output_grads) -> list:
    """Gradients of ``sum_r g[r] * f(x_r)`` in ``params()`` order."""
    if cache.owner != id(params) or cache.version != params.version:
        raise StaleCacheError("forward cache does not match the current parameters")
    g = np.asarray(output_grads, dtype=np.float64)[:, None]
    grads = [None] * (2 * len(params.weights))
    for l in range(len(params.weights) - 1, -1, -1):
        grads[2 * l] = g.T @ cache.inputs[l]
        grads[2 * l + 1] = g.sum(axis=0)
        if l:
            g = (g @ params.weights[l]) * (cache.pre[l - 1] > 0)
    return grads


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_global_norm(grads, max_norm: float = 0.1):
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return list(grads)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads, lr: float) -> None:
    """One descent step, in place on ``params`` (a list of arrays) and ``state``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        # p -= lr * (m / c1) / (sqrt(v / c2) + delta)
        np.multiply(v, 1.0 / c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.delta
        np.divide(m, tmp, out=tmp)
        tmp *= lr / c1
        p -= tmp


def flatten_params(nets) -> np.ndarray:
    """Move every weight and bias of ``nets`` into one contiguous vector.

    The networks keep working as before; their arrays become views of the
    returned vector, so optimizer steps on it update all of them at once.
    """
    total = sum(p.size for net in nets for p in net.params())
    flat = np.empty(total)
    pos = 0
    for net in nets:
        for l in range(len(net.weights)):
            for arrs in (net.weights, net.biases):
                a = arrs[l]
                view = flat[pos:pos + a.size].reshape(a.shape)
                view[...] = a
                arrs[l] = view
                pos += a.size
    return flat


def flatten_grads(grads, out=None) -> np.ndarray:
    """Concatenate per-network gradient lists in :func:`flatten_params` order."""
    return np.concatenate([g.ravel() for gs in grads for g in gs], out=out)


@dataclass
class TrainConfig:
    lr: float = 5e-5
    clip_norm: float = 0.1
    decay_factor: float = 0.5
    decay_every: int = 5
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    hidden: list | None = None  # None: [10K, 10K] with K = min(10 d, 80)

    def __post_init__(self):
        for name in ("lr", "clip_norm", "decay_factor", "decay_every", "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr * config.decay_factor ** (epoch // config.decay_every)


# -- checkpoints ---------------------------------------------------------------
#
# Layout (all little-endian):
#   8 bytes   magic b"MMOTCKPT"
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON header: {"version": 1, "networks": [[[out, in], ...], ...],
#             "meta": {...}}
#   payload   float64 values; for each network, for each layer: W row-major then b


def save_checkpoint(path, nets, meta: dict | None = None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "networks": [[list(w.shape) for w in net.weights] for net in nets],
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for net in nets:
            for w, b in zip(net.weights, net.biases):
                fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(nets, meta)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    buf = io.BytesIO(blob[12 + hlen:])
    nets = []
    for shapes in header["networks"]:
        ws, bs = [], []
        for out_dim, in_dim in shapes:
            ws.append(np.frombuffer(buf.read(8 * out_dim * in_dim), dtype="<f8").reshape(out_dim, in_dim).copy())
            bs.append(np.frombuffer(buf.read(8 * out_dim), dtype="<f8").copy())
        nets.append(Mlp(ws, bs))
    if buf.read(1):
        raise ValueError(f"{path}: trailing bytes after payload")
    return nets, header["meta"]

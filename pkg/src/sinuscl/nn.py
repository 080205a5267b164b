"""Encoder, projection heads, Adam and checkpoint IO.

The encoder is a small residual 3D conv stack without batch statistics: a
stride-2 stem, one residual block per stage, global average pooling and a
linear lift to ``feature_dim``. Each sample's features depend on that sample
only.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

EMBED_DIM = 128
NUM_CLASSES = 2


@dataclass
class EncoderConfig:
    input_extent: int = 32
    channels: Tuple[int, ...] = (16, 32, 64, 128)
    downsample: Tuple[bool, ...] = (True, True, True, True)
    residual: bool = True
    feature_dim: int = 512
    group_norm: bool = False
    stem_stride: int = 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.downsample = tuple(bool(d) for d in self.downsample)
        if len(self.channels) != len(self.downsample):
            raise ValueError("channels and downsample must have one entry per stage")
        if self.final_extent() < 1:
            raise ValueError(f"input extent {self.input_extent} collapses below 1 voxel")
        if self.group_norm and any(c % 4 for c in self.channels):
            raise ValueError("group_norm needs every channel count divisible by 4")

    def final_extent(self) -> int:
        n = (self.input_extent + 2 - 3) // self.stem_stride + 1
        for down in self.downsample:
            if down:
                n = (n + 2 - 3) // 2 + 1
        return n

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["downsample"] = list(self.downsample)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


Params = Dict[str, Tensor]


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_parameters(config: EncoderConfig, seed: int) -> Params:
    """Kaiming fan-in uniform weights and zero biases, fully determined by ``seed``."""
    rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
    params: Params = {}

    def conv(name, cout, cin, k):
        fan_in = cin * k ** 3
        params[f"{name}.w"] = Tensor(_kaiming_uniform(rng, (cout, cin, k, k, k), fan_in), True, name)
        params[f"{name}.b"] = Tensor(np.zeros(cout, np.float32), True, name)

    def linear(name, din, dout):
        params[f"{name}.w"] = Tensor(_kaiming_uniform(rng, (din, dout), din), True, name)
        params[f"{name}.b"] = Tensor(np.zeros(dout, np.float32), True, name)

    def gn(name, c):
        params[f"{name}.gamma"] = Tensor(np.ones(c, np.float32), True, name)
        params[f"{name}.beta"] = Tensor(np.zeros(c, np.float32), True, name)

    ch = config.channels
    conv("stem", ch[0], 1, 3)
    cin = ch[0]
    for i, (cout, down) in enumerate(zip(ch, config.downsample)):
        conv(f"stage{i}.conv1", cout, cin, 3)
        if config.group_norm:
            gn(f"stage{i}.gn1", cout)
        conv(f"stage{i}.conv2", cout, cout, 3)
        if config.group_norm:
            gn(f"stage{i}.gn2", cout)
        if config.residual and (down or cin != cout):
            conv(f"stage{i}.skip", cout, cin, 1)
        cin = cout
    linear("lift", cin, config.feature_dim)
    linear("proj1.fc1", config.feature_dim, config.feature_dim)
    linear("proj1.fc2", config.feature_dim, EMBED_DIM)
    linear("proj2", config.feature_dim, NUM_CLASSES)
    for name, p in params.items():
        p.name = name
    return params


def _conv(params, name, x, stride=1, padding=1):
    w, b = params[f"{name}.w"], params[f"{name}.b"]
    y = T.conv3d(x, w, stride=stride, padding=padding)
    return y + b.reshape(1, -1, 1, 1, 1)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int = 4, eps: float = 1e-5) -> Tensor:
    B, C = x.shape[:2]
    g = x.reshape(B, groups, -1)
    mu = T.mean(g, axis=2, keepdims=True)
    centered = g - mu
    var = T.mean(centered * centered, axis=2, keepdims=True)
    normed = (centered / T.sqrt(var + eps)).reshape(x.shape)
    shape = (1, C) + (1,) * (x.ndim - 2)
    return normed * gamma.reshape(shape) + beta.reshape(shape)


def encode(params: Params, x: Tensor, config: EncoderConfig) -> Tensor:
    """Map a (batch, 1, n, n, n) volume batch to (batch, feature_dim) features."""
    n = config.input_extent
    if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (n, n, n):
        raise ValueError(f"encode: expected input (batch, 1, {n}, {n}, {n}), got {x.shape}")
    h = T.relu(_conv(params, "stem", x, stride=config.stem_stride))
    for i, down in enumerate(config.downsample):
        stride = 2 if down else 1
        y = _conv(params, f"stage{i}.conv1", h, stride=stride)
        if config.group_norm:
            y = group_norm(y, params[f"stage{i}.gn1.gamma"], params[f"stage{i}.gn1.beta"])
        y = T.relu(y)
        y = _conv(params, f"stage{i}.conv2", y)
        if config.group_norm:
            y = group_norm(y, params[f"stage{i}.gn2.gamma"], params[f"stage{i}.gn2.beta"])
        if config.residual:
            skip = _conv(params, f"stage{i}.skip", h, stride=stride, padding=0) \
                if f"stage{i}.skip.w" in params else h
            y = y + skip
        h = T.relu(y)
    pooled = T.global_avg_pool(h)
    return pooled @ params["lift.w"] + params["lift.b"]


def project_contrastive(params: Params, features: Tensor) -> Tensor:
    """Proj1: 512 -> 512 -> 128 with a rectifier between, rows L2-normalised."""
    h = T.relu(features @ params["proj1.fc1.w"] + params["proj1.fc1.b"])
    z = h @ params["proj1.fc2.w"] + params["proj1.fc2.b"]
    return T.l2_normalize(z)


def project_classify(params: Params, features: Tensor) -> Tensor:
    """Proj2: raw two-class logits."""
    return features @ params["proj2.w"] + params["proj2.b"]


def anomaly_score(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of class 1 from (n, 2) logits."""
    logits = np.asarray(logits, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(logits[:, 0] - logits[:, 1]))


def param_groups(params: Params):
    """Split names into encoder / proj1 / proj2 groups."""
    groups = {"encoder": [], "proj1": [], "proj2": []}
    for name in params:
        if name.startswith("proj1."):
            groups["proj1"].append(name)
        elif name.startswith("proj2."):
            groups["proj2"].append(name)
        else:
            groups["encoder"].append(name)
    return groups


# optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Params, grads: Dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update of ``params`` named in ``grads``.

    Parameter arrays are replaced, never written in place. Moments decay on
    every call; a parameter whose gradient is identically zero is not moved.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"adam_step: no parameter named {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"adam_step: gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        if not g.any():
            # an all-zero gradient (unused or frozen path) leaves the parameter put
            continue
        update = (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        p.data = p.data - update


def collect_grads(params: Params, names: Optional[List[str]] = None) -> Dict[str, np.ndarray]:
    names = list(params) if names is None else names
    out = {}
    for n in names:
        g = params[n].grad
        out[n] = np.zeros_like(params[n].data) if g is None else g
    return out


def zero_grad(params: Params) -> None:
    for p in params.values():
        p.grad = None


# checkpoint --------------------------------------------------------------

CHECKPOINT_MAGIC = b"SCLM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: Params, path) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), struct.pack("<I", len(params))]
    for name, p in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(p.data, dtype="<f4")  # tobytes() is C-order; keeps 0-d shapes
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> Params:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<H", take(2))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4))
    params: Params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True, name=name, dtype=np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes after last tensor")
    return params

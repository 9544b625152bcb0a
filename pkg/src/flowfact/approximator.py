"""Small convolutional approximator with hand-written reverse-mode gradients.

Each observation plane gets its own encoder::

    conv 3x3/2 (8) -> relu -> conv 3x3/2 (16) -> relu -> flatten -> linear (64) -> relu

The embeddings are concatenated and fed through one hidden layer (512, relu)
and a linear head per output. Inputs are NHWC arrays; convolutions use a
padding of 1 so any spatial size (down to 1x1) is accepted.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np


class SpecMismatchError(ValueError):
    pass


class TapeReuseError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    planes: tuple[tuple[str, int], ...]
    height: int
    width: int
    heads: tuple[tuple[str, int], ...] = (("out", 3),)
    conv_filters: tuple[int, int] = (8, 16)
    embed_dim: int = 64
    hidden: int = 512
    dtype: str = "float32"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkConfig":
        return cls(
            planes=tuple((str(n), int(c)) for n, c in d["planes"]),
            height=int(d["height"]),
            width=int(d["width"]),
            heads=tuple((str(n), int(c)) for n, c in d["heads"]),
            conv_filters=tuple(int(f) for f in d["conv_filters"]),
            embed_dim=int(d["embed_dim"]),
            hidden=int(d["hidden"]),
            dtype=str(d["dtype"]),
        )


def _conv_out(n: int) -> int:
    return (n - 1) // 2 + 1


@dataclass
class Network:
    config: NetworkConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: NetworkConfig, seed: int | np.random.Generator = 0) -> "Network":
        rng = np.random.default_rng(seed)
        dtype = np.dtype(config.dtype)
        params: dict[str, np.ndarray] = {}

        def uniform(name, shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)

        f1, f2 = config.conv_filters
        h2, w2 = _conv_out(_conv_out(config.height)), _conv_out(_conv_out(config.width))
        for name, channels in config.planes:
            uniform(f"enc.{name}.conv1.w", (f1, channels, 3, 3), channels * 9)
            uniform(f"enc.{name}.conv1.b", (f1,), channels * 9)
            uniform(f"enc.{name}.conv2.w", (f2, f1, 3, 3), f1 * 9)
            uniform(f"enc.{name}.conv2.b", (f2,), f1 * 9)
            flat = h2 * w2 * f2
            uniform(f"enc.{name}.embed.w", (flat, config.embed_dim), flat)
            uniform(f"enc.{name}.embed.b", (config.embed_dim,), flat)
        concat = config.embed_dim * len(config.planes)
        uniform("trunk.w", (concat, config.hidden), concat)
        uniform("trunk.b", (config.hidden,), concat)
        for head, n_out in config.heads:
            uniform(f"head.{head}.w", (config.hidden, n_out), config.hidden)
            uniform(f"head.{head}.b", (n_out,), config.hidden)
        return cls(config, params)

    def copy(self) -> "Network":
        return Network(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "Network":
        cfg = replace(self.config, dtype=np.dtype(dtype).name)
        return Network(cfg, {k: v.astype(dtype) for k, v in self.params.items()})

    @property
    def plane_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.config.planes)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


class Tape:
    """Activations recorded by one forward pass; consumed by one backward pass."""

    def __init__(self, batch: int):
        self.batch = batch
        self.encoders: dict[str, dict[str, np.ndarray]] = {}
        self.concat: np.ndarray | None = None
        self.trunk_mask: np.ndarray | None = None
        self.hidden: np.ndarray | None = None
        self.consumed = False


def _im2col(x: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    """3x3 stride-2 patches of an NHWC array padded by one, as rows ordered (kh, kw, C)."""
    n, h, w, c = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((n, ho, wo, 3, 3, c), dtype=x.dtype)
    for kh in range(3):
        for kw in range(3):
            cols[:, :, :, kh, kw, :] = xp[:, kh : kh + 2 * ho - 1 : 2, kw : kw + 2 * wo - 1 : 2, :]
    return cols.reshape(n * ho * wo, 9 * c), (ho, wo)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], out_hw: tuple[int, int]) -> np.ndarray:
    n, h, w, c = shape
    ho, wo = out_hw
    d = dcols.reshape(n, ho, wo, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for kh in range(3):
        for kw in range(3):
            dxp[:, kh : kh + 2 * ho - 1 : 2, kw : kw + 2 * wo - 1 : 2, :] += d[:, :, :, kh, kw, :]
    return dxp[:, 1:-1, 1:-1, :]


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """(F, C, 3, 3) weights as an (F, 9C) matrix matching the im2col row order."""
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _kernel_grad(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    f, c = shape[:2]
    return g.reshape(f, 3, 3, c).transpose(0, 3, 1, 2)


def forward(net: Network, planes: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], Tape]:
    """Evaluate the network on a batch.

    ``planes`` maps plane names to NHWC arrays (a single HWC observation is
    promoted to a batch of one). Planes not in the network's spec are ignored.
    Returns one (N, n_out) array per head.
    """
    cfg = net.config
    p = net.params
    dtype = np.dtype(cfg.dtype)
    batch = None
    embeddings = []
    tape = None
    for name, channels in cfg.planes:
        if name not in planes:
            raise SpecMismatchError(f"observation lacks plane {name!r}")
        x = np.asarray(planes[name], dtype=dtype)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (cfg.height, cfg.width, channels):
            raise SpecMismatchError(
                f"plane {name!r} has shape {x.shape[1:]}, expected {(cfg.height, cfg.width, channels)}"
            )
        if batch is None:
            batch = x.shape[0]
            tape = Tape(batch)
        elif x.shape[0] != batch:
            raise SpecMismatchError("planes disagree on batch size")
        pre = f"enc.{name}."
        f1, f2 = cfg.conv_filters
        cols1, hw1 = _im2col(x)
        a1 = cols1 @ _kernel_matrix(p[pre + "conv1.w"]).T + p[pre + "conv1.b"]
        m1 = a1 > 0
        h1 = (a1 * m1).reshape(batch, hw1[0], hw1[1], f1)
        cols2, hw2 = _im2col(h1)
        a2 = cols2 @ _kernel_matrix(p[pre + "conv2.w"]).T + p[pre + "conv2.b"]
        m2 = a2 > 0
        flat = (a2 * m2).reshape(batch, -1)
        a3 = flat @ p[pre + "embed.w"] + p[pre + "embed.b"]
        m3 = a3 > 0
        embeddings.append(a3 * m3)
        tape.encoders[name] = {
            "cols1": cols1, "hw1": hw1, "m1": m1, "h1_shape": h1.shape,
            "cols2": cols2, "hw2": hw2, "m2": m2, "flat": flat, "m3": m3,
        }
    concat = np.concatenate(embeddings, axis=1)
    a4 = concat @ p["trunk.w"] + p["trunk.b"]
    m4 = a4 > 0
    hidden = a4 * m4
    tape.concat, tape.trunk_mask, tape.hidden = concat, m4, hidden
    outputs = {head: hidden @ p[f"head.{head}.w"] + p[f"head.{head}.b"] for head, _ in cfg.heads}
    return outputs, tape


def backward(net: Network, tape: Tape, upstream: Mapping[str, np.ndarray] | np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * outputs)`` with respect to every parameter."""
    if tape.consumed:
        raise TapeReuseError("tape has already been used for a backward pass")
    tape.consumed = True
    cfg = net.config
    p = net.params
    if not isinstance(upstream, Mapping):
        if len(cfg.heads) != 1:
            raise ValueError("multi-head network needs upstream gradients per head")
        upstream = {cfg.heads[0][0]: upstream}
    dtype = np.dtype(cfg.dtype)
    grads: dict[str, np.ndarray] = {}
    dhidden = np.zeros_like(tape.hidden)
    for head, _ in cfg.heads:
        g = np.asarray(upstream.get(head, 0.0), dtype=dtype)
        g = np.broadcast_to(g, (tape.batch, p[f"head.{head}.b"].shape[0]))
        grads[f"head.{head}.w"] = tape.hidden.T @ g
        grads[f"head.{head}.b"] = g.sum(axis=0)
        dhidden += g @ p[f"head.{head}.w"].T
    da4 = dhidden * tape.trunk_mask
    grads["trunk.w"] = tape.concat.T @ da4
    grads["trunk.b"] = da4.sum(axis=0)
    dconcat = da4 @ p["trunk.w"].T
    f1, f2 = cfg.conv_filters
    for i, (name, _) in enumerate(cfg.planes):
        rec = tape.encoders[name]
        pre = f"enc.{name}."
        da3 = dconcat[:, i * cfg.embed_dim : (i + 1) * cfg.embed_dim] * rec["m3"]
        grads[pre + "embed.w"] = rec["flat"].T @ da3
        grads[pre + "embed.b"] = da3.sum(axis=0)
        dflat = da3 @ p[pre + "embed.w"].T
        da2 = dflat.reshape(-1, f2) * rec["m2"]
        grads[pre + "conv2.w"] = _kernel_grad(da2.T @ rec["cols2"], p[pre + "conv2.w"].shape)
        grads[pre + "conv2.b"] = da2.sum(axis=0)
        dcols2 = da2 @ _kernel_matrix(p[pre + "conv2.w"])
        dh1 = _col2im(dcols2, rec["h1_shape"], rec["hw2"])
        da1 = dh1.reshape(-1, f1) * rec["m1"]
        grads[pre + "conv1.w"] = _kernel_grad(da1.T @ rec["cols1"], p[pre + "conv1.w"].shape)
        grads[pre + "conv1.b"] = da1.sum(axis=0)
    return grads


def add_grads(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: a[k] + b[k] for k in a}


@dataclass
class Adam:
    """Adam with bias correction and an optional linear learning-rate decay to zero."""

    lr: float = 3e-4
    total_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.lr
        return self.lr * max(0.0, 1.0 - self.step / self.total_steps)

    def apply(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for {name}; update rejected")
        lr = self.current_lr()
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for name, g in grads.items():
            w = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(w)
                self.v[name] = np.zeros_like(w)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if lr != 0.0:
                w -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(w.dtype)
        return params

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.step": np.array([self.step], dtype=np.int64)}
        for k in self.m:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out


def apply_update(opt: Adam, net: Network, grads: Mapping[str, np.ndarray]) -> Network:
    opt.apply(net.params, grads)
    return net


def polyak_update(target: Network, online: Network, tau: float) -> None:
    """Move target weights a fraction ``tau`` towards the online weights."""
    for k, w in target.params.items():
        w += (tau * (online.params[k] - w)).astype(w.dtype)


# -- checkpoint files ---------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic   b"FFCK"
#   u16     format version (1)
#   u32     metadata length L, followed by L bytes of UTF-8 JSON
#   u32     number of arrays
#   per array:
#     u16   name length, name bytes (UTF-8)
#     u8    dtype code (see _DTYPES)
#     u8    ndim, then ndim x u32 dimensions
#     raw   row-major little-endian data

CHECKPOINT_MAGIC = b"FFCK"
CHECKPOINT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(meta)), meta]
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = next((c for c, d in _DTYPES.items() if d == arr.dtype.newbyteorder("<")), None)
        if code is None:
            raise CheckpointFormatError(f"unsupported dtype {arr.dtype} for {name}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointFormatError(f"{path}: truncated at offset {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    magic = take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r} at offset 0, expected {CHECKPOINT_MAGIC!r}")
    version, meta_len = struct.unpack("<HI", take(6))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version} at offset 4")
    metadata = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        start = pos
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointFormatError(f"{path}: unknown dtype code {code} at offset {start}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(take(n), dtype=dt).reshape(shape).copy()
    if pos != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - pos} trailing bytes at offset {pos}")
    return arrays, metadata


def network_arrays(net: Network, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in net.params.items()}


def network_from_arrays(config: NetworkConfig, arrays: Mapping[str, np.ndarray], prefix: str) -> Network:
    template = Network.init(config, 0)
    params = {}
    for k in template.params:
        key = f"{prefix}.{k}"
        if key not in arrays:
            raise CheckpointFormatError(f"checkpoint lacks parameter {key}")
        params[k] = arrays[key].astype(config.dtype)
    return Network(config, params)

"""Neural building blocks: linear layers, MLPs, instance normalization,
Adam, and binary parameter checkpoints."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS_NORM = 1e-6

CHECKPOINT_MAGIC = b"DCAE"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "sigmoid", "linear")


def instance_norm(rows, eps=EPS_NORM):
    """Standardize each row to zero mean, unit variance (population variance,
    no learned affine).  Constant rows map to zeros through the eps floor."""
    if rows.ndim != 2:
        raise ValueError(f"instance_norm expects a matrix, got shape {rows.shape}")
    if rows.shape[1] < 2:
        raise ValueError(f"instance_norm needs width >= 2, got {rows.shape[1]}")
    m = ad.tmean(rows, axis=1, keepdims=True)
    centered = ad.sub(rows, m)
    var = ad.tmean(ad.square(centered), axis=1, keepdims=True)
    inv = ad.reciprocal(ad.sqrt(var + float(eps)))
    return ad.mul(centered, inv)


@dataclass
class Layer:
    weight: Tensor  # out x in
    bias: Tensor    # out
    activation: str

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


def _init_layer(in_dim, out_dim, activation, rng):
    if activation == "relu":
        bound = np.sqrt(6.0 / in_dim)          # Kaiming uniform
    else:
        bound = np.sqrt(6.0 / (in_dim + out_dim))  # Xavier uniform
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(np.float32)
    b = np.zeros(out_dim, dtype=np.float32)
    return Layer(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True), activation)


class Mlp:
    """Stack of linear layers with per-layer activation and an optional
    trailing instance normalization on the output."""

    def __init__(self, layers, final_instance_norm=False):
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(
                    f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        for l in layers:
            if l.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {l.activation!r}")
        self.layers = list(layers)
        self.final_instance_norm = bool(final_instance_norm)

    @classmethod
    def build(cls, in_dim, hidden, out_dim, rng, hidden_activation="relu",
              output_activation="linear", final_instance_norm=False):
        dims = [in_dim, *hidden, out_dim]
        layers = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            act = hidden_activation if i < len(dims) - 2 else output_activation
            layers.append(_init_layer(a, b, act, rng))
        return cls(layers, final_instance_norm=final_instance_norm)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def __call__(self, batch):
        return self.forward(batch)

    def forward(self, batch):
        if batch.ndim != 2 or batch.shape[1] != self.in_dim:
            raise ValueError(
                f"batch width {batch.shape} does not match layer input {self.in_dim}")
        x = batch
        for layer in self.layers:
            x = ad.add(ad.matmul(x, ad.transpose(layer.weight)), layer.bias)
            if layer.activation == "relu":
                x = ad.relu(x)
            elif layer.activation == "sigmoid":
                x = ad.sigmoid(x)
        if self.final_instance_norm:
            x = instance_norm(x)
        return x

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def named_parameters(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}layer{i}.weight"] = layer.weight
            out[f"{prefix}layer{i}.bias"] = layer.bias
        return out

    def copy(self):
        layers = [Layer(Tensor(l.weight.data.copy(), requires_grad=True),
                        Tensor(l.bias.data.copy(), requires_grad=True),
                        l.activation) for l in self.layers]
        return Mlp(layers, final_instance_norm=self.final_instance_norm)


@dataclass
class Adam:
    """Bias-corrected Adam over a fixed parameter list; moments keyed by
    parameter identity, parameter data updated in place."""

    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    _m: dict = field(default_factory=dict)
    _v: dict = field(default_factory=dict)

    def step(self, grads):
        """Apply one update.  ``grads`` maps parameter Tensor -> grad Tensor;
        parameters absent from the map are left untouched."""
        self.step_count += 1
        t = self.step_count
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            gd = g.data.astype(np.float32)
            if gd.shape != p.data.shape:
                raise ValueError(
                    f"gradient shape {gd.shape} does not match parameter {p.data.shape}")
            m = self._m.get(id(p))
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
                self._m[id(p)], self._v[id(p)] = m, v
            else:
                v = self._v[id(p)]
            m += (1 - self.beta1) * (gd - m)
            v += (1 - self.beta2) * (gd * gd - v)
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(np.float32)


# -- checkpoints -------------------------------------------------------------
# Layout: magic "DCAE", u32 version, u32 entry count, then per entry
# (u32 name length, UTF-8 name, u32 rank, u32 dims..., float32 LE payload),
# trailing CRC32 over everything after the magic.  Training metadata lives in
# a JSON sidecar next to the binary file.


def save_checkpoint(named_arrays, path, metadata=None):
    body = bytearray()
    body += struct.pack("<II", CHECKPOINT_VERSION, len(named_arrays))
    for name in sorted(named_arrays):
        arr = named_arrays[name]
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        data = np.ascontiguousarray(data, dtype=np.float32)
        nb = name.encode("utf-8")
        body += struct.pack("<I", len(nb)) + nb
        body += struct.pack("<I", data.ndim)
        body += struct.pack(f"<{data.ndim}I", *data.shape)
        body += data.astype("<f4").tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + bytes(body) + struct.pack("<I", crc))
    if metadata is not None:
        with open(str(path) + ".meta.json", "w") as fh:
            json.dump(metadata, fh, indent=2, sort_keys=True)


def load_checkpoint(path):
    """Return (named arrays dict, metadata dict or None)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic bytes, not a checkpoint file")
    body, (crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ValueError(f"{path}: checksum mismatch, file corrupt")
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(body):
            raise ValueError(f"{path}: truncated payload")
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals

    version, count = take("<II")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unknown checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if off + nlen > len(body):
            raise ValueError(f"{path}: truncated name")
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = take(f"<{n}f")
        out[name] = np.asarray(payload, dtype=np.float32).reshape(dims)
    if off != len(body):
        raise ValueError(f"{path}: trailing bytes after last entry")
    meta = None
    try:
        with open(str(path) + ".meta.json") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        pass
    return out, meta

"""Layer objects, the sequential :class:`Model` and the ``.elsm`` file format.

``.elsm`` layout (little-endian): magic ``ELSM``, u32 version, u32 header
length, UTF-8 JSON header (layer list + architecture), float32 parameters in
declaration order, then a u32 CRC-32 of everything before it.
"""

from __future__ import annotations

import copy
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import FormatError
from . import functional as F

MAGIC = b"ELSM"
VERSION = 1


class Conv(F.ConvLayer):
    def forward(self, x, train=False):
        self._x = x
        return F.conv2d_forward(x, self)

    def backward(self, grad):
        gx, self.grad_weights, self.grad_bias = F.conv2d_backward(self._x, self, grad)
        return gx

    def params(self):
        return [self.weights, self.bias]

    def grads(self):
        return [self.grad_weights, self.grad_bias]

    def state(self):
        return [self.weights, self.bias]

    def describe(self):
        o, c, kh, kw = self.weights.shape
        return dict(type="conv", out_ch=o, in_ch=c, kh=kh, kw=kw,
                    stride=self.stride, padding=self.padding)


class BatchNorm(F.BatchNormLayer):
    def forward(self, x, train=False):
        self.mode = "train" if train else "infer"
        out, self._cache = F.batchnorm_forward(x, self)
        return out

    def backward(self, grad):
        gx, self.grad_gamma, self.grad_beta = F.batchnorm_backward(grad, self._cache, self)
        return gx

    def params(self):
        return [self.gamma, self.beta]

    def grads(self):
        return [self.grad_gamma, self.grad_beta]

    def state(self):
        return [self.gamma, self.beta, self.running_mean, self.running_var]

    def describe(self):
        return dict(type="batchnorm", channels=len(self.gamma),
                    momentum=self.momentum, eps=self.eps)


class ReLU:
    def forward(self, x, train=False):
        self._x = x
        return F.relu_forward(x)

    def backward(self, grad):
        return F.relu_backward(self._x, grad)

    def params(self):
        return []

    grads = state = params

    def describe(self):
        return dict(type="relu")


class GlobalAvgPool:
    def forward(self, x, train=False):
        self._shape = x.shape
        return F.global_avg_pool(x).reshape(x.shape[0], x.shape[1])

    def backward(self, grad):
        return F.global_avg_pool_backward(self._shape, grad.reshape(grad.shape + (1, 1)))

    def params(self):
        return []

    grads = state = params

    def describe(self):
        return dict(type="gap")


class Dense:
    def __init__(self, weights, bias):
        self.weights = np.asarray(weights)
        self.bias = np.asarray(bias)

    def forward(self, x, train=False):
        self._x = x
        return F.dense_forward(x, self.weights, self.bias)

    def backward(self, grad):
        gx, self.grad_weights, self.grad_bias = F.dense_backward(self._x, self.weights, grad)
        return gx

    def params(self):
        return [self.weights, self.bias]

    def grads(self):
        return [self.grad_weights, self.grad_bias]

    def state(self):
        return [self.weights, self.bias]

    def describe(self):
        o, i = self.weights.shape
        return dict(type="dense", out_features=o, in_features=i)


class Model:
    """Sequential network plus a free-form architecture descriptor."""

    def __init__(self, layers, arch: dict | None = None):
        self.layers = list(layers)
        self.arch = dict(arch or {})

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    def state(self):
        return [s for layer in self.layers for s in layer.state()]

    def snapshot(self):
        return [s.copy() for s in self.state()]

    def restore(self, snapshot):
        for dst, src in zip(self.state(), snapshot):
            dst[...] = src

    def copy(self):
        return copy.deepcopy(self)

    def describe(self):
        return [layer.describe() for layer in self.layers]


def _build_layer(desc: dict, dtype):
    kind = desc.get("type")
    if kind == "conv":
        w = np.zeros((desc["out_ch"], desc["in_ch"], desc["kh"], desc["kw"]), dtype)
        return Conv(w, np.zeros(desc["out_ch"], dtype), desc["stride"], desc["padding"])
    if kind == "batchnorm":
        return BatchNorm(desc["channels"], desc["momentum"], desc["eps"], dtype)
    if kind == "relu":
        return ReLU()
    if kind == "gap":
        return GlobalAvgPool()
    if kind == "dense":
        return Dense(np.zeros((desc["out_features"], desc["in_features"]), dtype),
                     np.zeros(desc["out_features"], dtype))
    raise FormatError(f"unknown layer type {kind!r}")


def model_to_bytes(model: Model) -> bytes:
    header = json.dumps({"layers": model.describe(), "arch": model.arch},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(s, dtype="<f4").tobytes() for s in model.state())
    blob = MAGIC + struct.pack("<II", VERSION, len(header)) + header + body
    return blob + struct.pack("<I", zlib.crc32(blob))


def model_from_bytes(buf: bytes) -> Model:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise FormatError("bad magic: not an .elsm model")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} (expected {VERSION})")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise FormatError("checksum mismatch: model file is corrupt or truncated")
    try:
        meta = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable model header: {exc}") from exc
    model = Model([_build_layer(d, np.float32) for d in meta["layers"]], meta.get("arch"))
    body = buf[12 + hlen:-4]
    state = model.state()
    need = sum(s.size for s in state) * 4
    if len(body) != need:
        raise FormatError(f"parameter payload is {len(body)} bytes, header implies {need}")
    values = np.frombuffer(body, dtype="<f4")
    off = 0
    for s in state:
        s[...] = values[off:off + s.size].reshape(s.shape)
        off += s.size
    return model


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> Model:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"missing model file: {p}")
    return model_from_bytes(p.read_bytes())

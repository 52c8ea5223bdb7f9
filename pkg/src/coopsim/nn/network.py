"""Network container (encoder + detection head), builder and weight files.

The encoder ends at the feature grid that vehicles exchange; the head turns
an aggregated grid into detector output. Keeping the two stages addressable
separately is what the sharing pipelines need.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from coopsim.nn.layers import BatchNorm, Conv2D, Layer, LeakyReLU, MaxPool2, ShapeError

__all__ = [
    "Network",
    "run_layers",
    "backward_layers",
    "build_network",
    "save_network",
    "load_network",
    "save_checkpoint",
    "load_checkpoint",
]

WEIGHT_MAGIC = b"CPNN"
WEIGHT_VERSION = 1

_KIND_CONV = 1
_KIND_BATCHNORM = 2
_KIND_LEAKYRELU = 3
_KIND_MAXPOOL = 4
_KIND_SPLIT = 255  # marks the encoder/head boundary


def run_layers(layers: list[Layer], x: np.ndarray, train: bool, base: int = 0):
    """Forward through a layer list; returns (output, caches)."""
    caches = []
    for i, layer in enumerate(layers):
        try:
            x, cache = layer.forward(x, train)
        except ShapeError as e:
            raise ShapeError(f"layer {base + i} ({layer.kind}): {e}") from None
        caches.append(cache)
    return x, caches


def backward_layers(layers: list[Layer], dy: np.ndarray, caches: list) -> np.ndarray:
    """Backward through a layer list, accumulating parameter gradients."""
    for layer, cache in zip(reversed(layers), reversed(caches)):
        dy = layer.backward(dy, cache)
    return dy


class Network:
    """Encoder producing a shareable feature grid, plus a detection head."""

    def __init__(self, encoder: list[Layer], head: list[Layer]):
        self.encoder = encoder
        self.head = head

    @property
    def downsample(self) -> int:
        """Spatial reduction factor of the encoder (2 per pooling layer)."""
        return 2 ** sum(1 for l in self.encoder if isinstance(l, MaxPool2))

    @property
    def feature_channels(self) -> int:
        chans = [l.out_channels for l in self.encoder if isinstance(l, Conv2D)]
        if not chans:
            raise ValueError("encoder has no convolution layers")
        return chans[-1]

    def encode(self, x: np.ndarray, train: bool):
        return run_layers(self.encoder, x, train)

    def head_forward(self, f: np.ndarray, train: bool):
        return run_layers(self.head, f, train, base=len(self.encoder))

    def forward(self, x: np.ndarray, train: bool):
        f, enc_caches = self.encode(x, train)
        y, head_caches = self.head_forward(f, train)
        return y, (enc_caches, head_caches)

    def backward(self, dy: np.ndarray, caches) -> np.ndarray:
        enc_caches, head_caches = caches
        df = backward_layers(self.head, dy, head_caches)
        return backward_layers(self.encoder, df, enc_caches)

    def params(self):
        """(layer_index, param_name, value, grad) over encoder then head."""
        for i, layer in enumerate(self.encoder + self.head):
            for name, value, grad in layer.params():
                yield i, name, value, grad

    def zero_grads(self) -> None:
        for layer in self.encoder + self.head:
            layer.zero_grad()

    def num_params(self) -> int:
        return sum(value.size for _i, _n, value, _g in self.params())


def build_network(
    in_channels: int,
    encoder_widths: list[int],
    encoder_pools: int,
    head_widths: list[int],
    out_channels: int,
    rng: np.random.Generator,
    slope: float = 0.1,
) -> Network:
    """Conv/BN/LeakyReLU stacks; a pool follows each of the first
    `encoder_pools` encoder stages; the head ends in a linear 1x1 conv."""
    if encoder_pools > len(encoder_widths):
        raise ValueError("more pools than encoder stages")
    encoder: list[Layer] = []
    prev = in_channels
    for i, width in enumerate(encoder_widths):
        conv = Conv2D(prev, width, kernel=3)
        conv.init_weights(rng)
        encoder += [conv, BatchNorm(width), LeakyReLU(slope)]
        if i < encoder_pools:
            encoder.append(MaxPool2())
        prev = width
    head: list[Layer] = []
    for width in head_widths:
        conv = Conv2D(prev, width, kernel=3)
        conv.init_weights(rng)
        head += [conv, BatchNorm(width), LeakyReLU(slope)]
        prev = width
    final = Conv2D(prev, out_channels, kernel=1)
    final.init_weights(rng)
    head.append(final)
    return Network(encoder, head)


def _layer_bytes(layer: Layer) -> bytes:
    if isinstance(layer, Conv2D):
        head = struct.pack(
            "<BBHH", _KIND_CONV, layer.kernel, layer.in_channels, layer.out_channels
        )
        return (
            head
            + layer.weight.astype("<f8").tobytes()
            + layer.bias.astype("<f8").tobytes()
        )
    if isinstance(layer, BatchNorm):
        head = struct.pack("<BHdd", _KIND_BATCHNORM, layer.channels, layer.eps, layer.momentum)
        return head + b"".join(
            a.astype("<f8").tobytes()
            for a in (layer.gamma, layer.beta, layer.running_mean, layer.running_var)
        )
    if isinstance(layer, LeakyReLU):
        return struct.pack("<Bd", _KIND_LEAKYRELU, layer.slope)
    if isinstance(layer, MaxPool2):
        return struct.pack("<B", _KIND_MAXPOOL)
    raise TypeError(f"cannot serialize layer {layer!r}")


def network_bytes(net: Network) -> bytes:
    records = [_layer_bytes(l) for l in net.encoder]
    records.append(struct.pack("<B", _KIND_SPLIT))
    records += [_layer_bytes(l) for l in net.head]
    header = WEIGHT_MAGIC + struct.pack("<BH", WEIGHT_VERSION, len(records))
    return header + b"".join(records)


def save_network(net: Network, path) -> None:
    Path(path).write_bytes(network_bytes(net))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError("truncated weight file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(count * 8), dtype="<f8").astype(np.float64)


def _read_layer(r: _Reader, kind: int) -> Layer:
    if kind == _KIND_CONV:
        k, cin, cout = r.unpack("<BHH")
        layer = Conv2D(cin, cout, kernel=k)
        layer.weight[...] = r.floats(k * k * cin * cout).reshape(k, k, cin, cout)
        layer.bias[...] = r.floats(cout)
        return layer
    if kind == _KIND_BATCHNORM:
        c, eps, momentum = r.unpack("<Hdd")
        layer = BatchNorm(c, eps=eps, momentum=momentum)
        layer.gamma[...] = r.floats(c)
        layer.beta[...] = r.floats(c)
        layer.running_mean[...] = r.floats(c)
        layer.running_var[...] = r.floats(c)
        return layer
    if kind == _KIND_LEAKYRELU:
        (slope,) = r.unpack("<d")
        return LeakyReLU(slope)
    if kind == _KIND_MAXPOOL:
        return MaxPool2()
    raise ValueError(f"unknown layer kind {kind}")


def network_from_bytes(buf: bytes) -> tuple[Network, int]:
    """Parse a weight blob; returns (network, bytes consumed)."""
    r = _Reader(buf)
    if r.take(4) != WEIGHT_MAGIC:
        raise ValueError("bad weight file magic")
    version, count = r.unpack("<BH")
    if version != WEIGHT_VERSION:
        raise ValueError(f"unsupported weight file version {version}")
    encoder: list[Layer] = []
    head: list[Layer] = []
    current = encoder
    for _ in range(count):
        (kind,) = r.unpack("<B")
        if kind == _KIND_SPLIT:
            current = head
            continue
        current.append(_read_layer(r, kind))
    return Network(encoder, head), r.pos


def load_network(path) -> Network:
    net, _used = network_from_bytes(Path(path).read_bytes())
    return net


def save_checkpoint(net: Network, path, epoch: int, seed: int) -> None:
    """Weights plus resume footer. Sampling streams are derived from
    (seed, epoch), so the pair fully captures the training RNG state."""
    body = network_bytes(net)
    Path(path).write_bytes(body + struct.pack("<IQ", epoch, seed & 0xFFFFFFFFFFFFFFFF))


def load_checkpoint(path) -> tuple[Network, int, int]:
    buf = Path(path).read_bytes()
    net, used = network_from_bytes(buf)
    epoch, seed = struct.unpack("<IQ", buf[used : used + 12])
    return net, epoch, seed

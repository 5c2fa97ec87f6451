"""VGG-style networks, head replacement and the ``VGGW`` weight archive.

Archive layout (little-endian, no padding)::

    b"VGGW" | u32 version=1 | u32 count
    count x ( u16 name_len | name utf-8 | u8 dtype | u8 ndim | ndim x u32 | payload )

dtype 0 is float32, 1 is float64.
"""
from __future__ import annotations

import io
import math
import re
import struct
from collections import OrderedDict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .nn import Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, Network, ReLU, Sigmoid
from .tensor import SeededRng

MAGIC = b"VGGW"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

PathLike = Union[str, Path]


@dataclass(frozen=True)
class VggConfig:
    blocks: Tuple[Tuple[int, ...], ...] = ((64, 64), (128, 128), (256, 256, 256),
                                           (512, 512, 512), (512, 512, 512))
    fc: Tuple[int, ...] = (4096, 4096)
    input_size: int = 224
    num_classes: int = 1000
    dropout: float = 0.5

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (3, self.input_size, self.input_size)

    @property
    def flatten_width(self) -> int:
        side = self.input_size // 2 ** len(self.blocks)
        return self.blocks[-1][-1] * side * side

    def param_count(self) -> int:
        """Closed-form parameter count, no allocation."""
        total, c_in = 0, 3
        for block in self.blocks:
            for c_out in block:
                total += 3 * 3 * c_in * c_out + c_out
                c_in = c_out
        dims = [self.flatten_width, *self.fc, self.num_classes]
        return total + sum(a * b + b for a, b in zip(dims, dims[1:]))


VGG16 = VggConfig()
VGG_MINI = VggConfig(blocks=((8, 8), (16, 16)), fc=(64,), input_size=32, num_classes=1)


def build_vgg(config: VggConfig = VGG16, seed: int = 0, dtype="float32") -> Network:
    """Conv blocks of 3x3 convolutions + ReLU, each closed by a 2x2 max pool,
    then the fully connected stack with ReLU and dropout, then a linear
    output layer of ``num_classes`` units."""
    if config.num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    rng = SeededRng(seed)
    layers: List[Layer] = []
    c_in = 3
    for b, block in enumerate(config.blocks, start=1):
        for i, c_out in enumerate(block, start=1):
            layers.append(Conv2D(c_in, c_out, 3, stride=1, zero_pad=1, name=f"conv{b}_{i}",
                                 rng=rng, dtype=dtype))
            layers.append(ReLU(name=f"relu{b}_{i}"))
            c_in = c_out
        layers.append(MaxPool2D(2, 2, name=f"pool{b}"))
    layers.append(Flatten(name="flatten"))
    d_in = config.flatten_width
    for i, d_out in enumerate(config.fc, start=1):
        layers.append(Dense(d_in, d_out, name=f"fc{i}", rng=rng, dtype=dtype))
        layers.append(ReLU(name=f"relu_fc{i}"))
        layers.append(Dropout(config.dropout, name=f"drop{i}"))
        d_in = d_out
    layers.append(Dense(d_in, config.num_classes, name=f"fc{len(config.fc) + 1}", rng=rng,
                        dtype=dtype, init="glorot"))
    return Network(layers, config.input_shape, seed=seed)


def build_vgg16(num_classes: int = 1000, seed: int = 0, dtype="float32") -> Network:
    return build_vgg(VggConfig(num_classes=num_classes), seed=seed, dtype=dtype)


def build_vgg_mini(num_classes: int = 1, seed: int = 0, dtype="float32") -> Network:
    return build_vgg(VggConfig(blocks=VGG_MINI.blocks, fc=VGG_MINI.fc, input_size=32,
                               num_classes=num_classes), seed=seed, dtype=dtype)


def replace_head(net: Network, out_dim: int = 1, freeze_backbone: bool = True,
                 seed: int = 0) -> Network:
    """Swap the final dense layer for a fresh ``Dense(in -> out_dim)`` head.

    For ``out_dim == 1`` a sigmoid follows the head. The head is drawn from
    uniform(-sqrt(6/(in+out)), +sqrt(6/(in+out))) with zero bias. Backbone
    tensors are carried over untouched; with ``freeze_backbone`` only the
    head stays trainable. The input network's layers are reused, not copied.
    """
    layers = list(net.layers)
    while layers and not layers[-1].has_weights:
        if isinstance(layers[-1], Sigmoid):
            layers.pop()
        else:
            break
    if not layers or not isinstance(layers[-1], Dense):
        raise ValueError("network has no final dense layer to replace")
    old = layers.pop()
    head = Dense(old.in_dim, out_dim, name="head", rng=SeededRng(seed),
                 dtype=old.params["weight"].dtype, init="glorot")
    layers.append(head)
    if out_dim == 1:
        layers.append(Sigmoid(name="sigmoid"))
    for layer in layers:
        layer.trainable = layer is head or not freeze_backbone
    return Network(layers, net.input_shape, seed=net.rng.seed)


# ---------------------------------------------------------------- archive

class ArchiveError(ValueError):
    """Base class for weight archive problems."""


class ArchiveFormatError(ArchiveError):
    """Bad magic or malformed record."""


class UnsupportedVersionError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


class WeightMismatchError(ArchiveError):
    """Archive tensors do not line up with the target network by name/shape."""


def dump_archive(tensors: "OrderedDict[str, np.ndarray]") -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, t in tensors.items():
        t = np.asarray(t)
        dt = t.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise ArchiveError(f"{name}: unsupported dtype {t.dtype}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _DTYPE_CODES[dt], t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t, dtype=dt).tobytes())
    return buf.getvalue()


def write_archive(tensors: "OrderedDict[str, np.ndarray]", path: PathLike) -> None:
    Path(path).write_bytes(dump_archive(tensors))


def parse_archive(data: bytes, path: str = "<bytes>") -> "OrderedDict[str, np.ndarray]":
    """Parse a whole archive; nothing is returned unless every record is valid."""
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedArchiveError(f"{path}: truncated while reading {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if len(data) < 4 or data[:4] != MAGIC:
        raise ArchiveFormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported archive version {version}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise ArchiveFormatError(f"{path}: tensor name is not UTF-8") from e
        code, ndim = struct.unpack("<BB", take(2, f"{name} dtype"))
        if code not in _CODE_DTYPES:
            raise ArchiveFormatError(f"{path}: {name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        dt = _CODE_DTYPES[code]
        payload = take(math.prod(dims) * dt.itemsize, f"{name} payload")
        if name in out:
            raise ArchiveFormatError(f"{path}: duplicate tensor name {name!r}")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(data):
        raise ArchiveFormatError(f"{path}: {len(data) - pos} trailing bytes after last tensor")
    return out


def read_archive(path: PathLike) -> "OrderedDict[str, np.ndarray]":
    return parse_archive(Path(path).read_bytes(), str(path))


def save_weights(net: Network, path: PathLike) -> None:
    write_archive(OrderedDict(net.named_params()), path)


def load_weights(path: PathLike, net: Optional[Network] = None):
    """Read an archive; with ``net`` also copy tensors into it by name and shape.

    The network is only modified once every tensor has been matched.
    """
    tensors = read_archive(path)
    if net is None:
        return tensors
    return load_tensors(net, tensors, str(path))


def load_tensors(net: Network, tensors: Dict[str, np.ndarray], path: str = "<archive>") -> Network:
    expected = OrderedDict(net.named_params())
    for name, p in expected.items():
        if name not in tensors:
            raise WeightMismatchError(f"archive {path} is missing tensor {name!r}")
        if tensors[name].shape != p.shape:
            raise WeightMismatchError(f"tensor {name!r}: archive shape {tensors[name].shape} "
                                      f"!= network shape {p.shape}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise WeightMismatchError(f"archive {path} has tensors unknown to the network: {extra}")
    for layer in net.layers:
        for k in layer.params:
            layer.params[k] = tensors[f"{layer.name}.{k}"].copy()
    net.zero_grad()
    return net


_CONV_RE = re.compile(r"conv(\d+)_(\d+)\.weight$")
_FC_RE = re.compile(r"fc(\d+)\.weight$")


def config_from_tensors(tensors: Dict[str, np.ndarray]) -> Tuple[VggConfig, bool]:
    """Recover the architecture from tensor names and shapes.

    Returns the config and whether the archive carries a replaced ``head``.
    """
    convs: Dict[int, Dict[int, int]] = {}
    fcs: Dict[int, Tuple[int, int]] = {}
    for name, t in tensors.items():
        if m := _CONV_RE.match(name):
            convs.setdefault(int(m[1]), {})[int(m[2])] = t.shape[0]
        elif m := _FC_RE.match(name):
            fcs[int(m[1])] = t.shape
    if not convs or not fcs:
        raise ArchiveFormatError("archive does not describe a VGG-style network")
    blocks = tuple(tuple(convs[b][i] for i in sorted(convs[b])) for b in sorted(convs))
    fc_shapes = [fcs[i] for i in sorted(fcs)]
    has_head = "head.weight" in tensors
    if has_head:
        hidden = tuple(s[1] for s in fc_shapes)
        num_classes = tensors["head.weight"].shape[1]
    else:
        hidden = tuple(s[1] for s in fc_shapes[:-1])
        num_classes = fc_shapes[-1][1]
    side = math.isqrt(fc_shapes[0][0] // blocks[-1][-1])
    cfg = VggConfig(blocks=blocks, fc=hidden, input_size=side * 2 ** len(blocks),
                    num_classes=num_classes)
    return cfg, has_head


def network_from_archive(path: PathLike) -> Network:
    """Rebuild a network whose architecture is implied by the archive, then load it."""
    tensors = read_archive(path)
    cfg, has_head = config_from_tensors(tensors)
    dtype = next(iter(tensors.values())).dtype
    if has_head:
        base = replace(cfg, num_classes=1)
        net = replace_head(build_vgg(base, dtype=dtype), tensors["head.weight"].shape[1],
                           freeze_backbone=False)
    else:
        net = build_vgg(cfg, dtype=dtype)
    return load_tensors(net, tensors, str(path))

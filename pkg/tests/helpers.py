"""Shared builders for small float64 networks and losses used by gradient checks."""
import numpy as np

from sightline.nn import (Conv2D, Dense, Dropout, Flatten, MaxPool2D, Network, ReLU, Sigmoid)
from sightline.optim import bce_loss
from sightline.tensor import SeededRng


def projection_loss(shape, seed):
    """L = sum(out * R) for a fixed random R; dL/dout = R."""
    r = np.random.default_rng(seed).normal(size=shape)

    def fn(out):
        return float(np.sum(out * r)), r.copy()
    return fn


def quadratic_loss(out):
    return 0.5 * float(np.sum(out ** 2)), out.copy()


def bce_on(y):
    def fn(out):
        loss, g = bce_loss(y, out.reshape(-1))
        return loss, g.reshape(out.shape)
    return fn


def single_layer_cases(seed):
    """(name, network, input) for every layer variant, float64."""
    rng = SeededRng(seed)
    g = np.random.default_rng(seed)
    cases = [
        ("conv", Network([Conv2D(2, 3, 3, zero_pad=1, rng=rng, dtype="float64")], (2, 5, 5)),
         g.normal(size=(2, 2, 5, 5))),
        ("conv_stride", Network([Conv2D(2, 2, 3, 2, stride=2, rng=rng, dtype="float64")], (2, 7, 6)),
         g.normal(size=(2, 2, 7, 6))),
        ("maxpool", Network([MaxPool2D(2, 2)], (2, 4, 6)), g.normal(size=(2, 2, 4, 6))),
        ("maxpool_overlap", Network([MaxPool2D(3, 1)], (1, 5, 5)), g.normal(size=(2, 1, 5, 5))),
        ("dense", Network([Dense(4, 3, rng=rng, dtype="float64")], (4,)), g.normal(size=(3, 4))),
        ("relu", Network([ReLU()], (6,)), _away_from_zero(g.normal(size=(3, 6)))),
        ("sigmoid", Network([Sigmoid()], (6,)), 3 * g.normal(size=(3, 6))),
        ("flatten", Network([Flatten()], (2, 3, 2)), g.normal(size=(2, 2, 3, 2))),
        ("dropout", Network([Dropout(0.4)], (8,), seed=seed), g.normal(size=(3, 8))),
    ]
    for _, net, _ in cases:
        for layer in net.layers:
            for k in layer.params:
                layer.params[k] = layer.params[k] + 0.1 * g.normal(size=layer.params[k].shape)
    return cases


def _away_from_zero(x):
    return np.where(np.abs(x) < 0.05, np.sign(x) * 0.05 + x, x)


def conv_pool_dense_net(seed, dtype="float64"):
    rng = SeededRng(seed)
    return Network([
        Conv2D(1, 2, 3, zero_pad=1, name="conv", rng=rng, dtype=dtype),
        ReLU(name="relu"),
        MaxPool2D(2, 2, name="pool"),
        Flatten(name="flat"),
        Dense(2 * 4 * 4, 1, name="dense", rng=rng, dtype=dtype),
        Sigmoid(name="sig"),
    ], (1, 8, 8), seed=seed)


class PixelStub:
    """Fake classifier whose probability is read off the first pixel (or a constant)."""

    def __init__(self, size=2, const=None):
        self.input_shape = (3, size, size)
        self.const = const

    def forward(self, x, mode="eval"):
        x = np.asarray(x)
        if self.const is not None:
            return np.full((len(x), 1), self.const)
        return x[:, 0, 0, 0].reshape(-1, 1).astype(np.float64)


def constant_record(value, label=None, size=2, source=""):
    from sightline.data import ImageRecord
    return ImageRecord(np.full((size, size, 3), value, np.uint8), label, source)


def synthetic_two_class(per_class=16, seed=0, size=32, names=("cat", "dog")):
    """Warm-toned vs cool-toned noise images with a random blob."""
    from sightline.data import ImageRecord, LabeledDataset
    g = np.random.default_rng(seed)
    recs = []
    for k, name in enumerate(names):
        for i in range(per_class):
            warm = g.integers(150, 231, (size, size))
            cool = g.integers(20, 91, (size, size))
            mid = g.integers(60, 141, (size, size))
            r, b = (warm, cool) if k == 0 else (cool, warm)
            img = np.stack([r, mid, b], -1)
            cy, cx = g.integers(size // 4, 3 * size // 4, 2)
            yy, xx = np.mgrid[:size, :size]
            blob = (yy - cy) ** 2 + (xx - cx) ** 2 < g.integers(16, 50)
            img[blob] = img[blob] // 2 + 60
            recs.append(ImageRecord(img.astype(np.uint8), name, f"{name}{i}"))
    return LabeledDataset(recs, list(names))

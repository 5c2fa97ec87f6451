"""Binary cross-entropy, Adam updates and classification reports."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .nn import Network

CLAMP_EPS = 1e-7


class TrainingError(RuntimeError):
    """Raised when an update would propagate non-finite values."""


def bce_loss(y, p, clamp_eps: float = CLAMP_EPS) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient with respect to ``p``.

    Probabilities are clamped to ``[clamp_eps, 1 - clamp_eps]`` before the
    logs. The gradient is taken at the clamped value.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    p_in = np.asarray(p)
    p = p_in.astype(np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("bce_loss needs at least one sample")
    if y.shape != p.shape:
        raise ValueError(f"label/probability length mismatch: {y.size} vs {p.size}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    n = y.size
    p = np.clip(p, clamp_eps, 1 - clamp_eps)
    loss = -np.sum(y * np.log(p) + (1 - y) * np.log(1 - p)) / n
    grad = -(y / p - (1 - y) / (1 - p)) / n
    return float(loss), grad.reshape(p_in.shape).astype(p_in.dtype if p_in.dtype.kind == "f" else np.float64)


@dataclass
class Adam:
    """Adam optimizer holding per-parameter moment estimates.

    Only trainable layers of the network are touched by :meth:`step`.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def update(self, name: str, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Update one tensor in place using the current step counter."""
        if grad.shape != param.shape:
            raise ValueError(f"{name}: gradient shape {grad.shape} != parameter shape {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = self.m.get(name)
        if m is None:
            m = self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
        v = self.v[name]
        b1, b2 = self.beta1, self.beta2
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * np.square(grad)
        m_hat = m / (1 - b1 ** self.t)
        v_hat = v / (1 - b2 ** self.t)
        param -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(param.dtype, copy=False)
        return param

    def step(self, net: Network) -> None:
        self.t += 1
        for name, layer, key in net.trainable_params():
            self.update(name, layer.params[key], layer.grads[key])


@dataclass
class ConfusionMatrix:
    class_names: List[str]
    counts: np.ndarray

    @classmethod
    def from_labels(cls, true_labels, predicted_labels, class_names: Sequence[str]) -> "ConfusionMatrix":
        names = list(class_names)
        index = {c: i for i, c in enumerate(names)}
        true_labels, predicted_labels = list(true_labels), list(predicted_labels)
        if len(true_labels) != len(predicted_labels):
            raise ValueError(f"label sequences differ in length: {len(true_labels)} vs {len(predicted_labels)}")
        if not true_labels:
            raise ValueError("classification report needs at least one sample")
        counts = np.zeros((len(names), len(names)), dtype=np.int64)
        for t, p in zip(true_labels, predicted_labels):
            try:
                counts[index[t], index[p]] += 1
            except KeyError as e:
                raise ValueError(f"label {e.args[0]!r} not in class names {names}") from None
        return cls(names, counts)

    def expand(self) -> Tuple[List[str], List[str]]:
        """Label sequences (true, predicted) realizing these counts, row by row."""
        true, pred = [], []
        for i, t in enumerate(self.class_names):
            for j, p in enumerate(self.class_names):
                true += [t] * int(self.counts[i, j])
                pred += [p] * int(self.counts[i, j])
        return true, pred


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class ClassificationReport:
    classes: Dict[str, ClassMetrics]
    accuracy: float
    total: int
    confusion: Optional[ConfusionMatrix] = None

    def format(self, digits: int = 2) -> str:
        """Render in the ``precision recall f1-score support`` table layout."""
        width = max(len("accuracy"), *(len(c) for c in self.classes))
        head = ["precision", "recall", "f1-score", "support"]
        col = max(len(h) for h in head) + 1
        lines = [" " * width + "".join(h.rjust(col) for h in head), ""]
        for name, m in self.classes.items():
            vals = [f"{v:.{digits}f}" for v in (m.precision, m.recall, m.f1)] + [str(m.support)]
            lines.append(name.rjust(width) + "".join(v.rjust(col) for v in vals))
        lines.append("")
        lines.append("accuracy".rjust(width) + "".rjust(col) * 2
                     + f"{self.accuracy:.{digits}f}".rjust(col) + str(self.total).rjust(col))
        return "\n".join(lines) + "\n"

    def rounded(self, digits: int = 2) -> Dict[str, object]:
        out: Dict[str, object] = {
            name: (round(m.precision, digits), round(m.recall, digits), round(m.f1, digits), m.support)
            for name, m in self.classes.items()
        }
        out["accuracy"] = round(self.accuracy, digits)
        return out


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def report_from_confusion(cm: ConfusionMatrix) -> ClassificationReport:
    counts = cm.counts
    total = int(counts.sum())
    classes = {}
    for i, name in enumerate(cm.class_names):
        tp = counts[i, i]
        precision = _ratio(tp, counts[:, i].sum())
        recall = _ratio(tp, counts[i, :].sum())
        f1 = _ratio(2 * precision * recall, precision + recall)
        classes[name] = ClassMetrics(float(precision), float(recall), float(f1), int(counts[i, :].sum()))
    return ClassificationReport(classes, _ratio(np.trace(counts), total), total, cm)


def classification_report(true_labels, predicted_labels, class_names: Sequence[str]) -> ClassificationReport:
    return report_from_confusion(ConfusionMatrix.from_labels(true_labels, predicted_labels, class_names))

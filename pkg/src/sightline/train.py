"""Mini-batch training with per-epoch validation and early stopping."""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .data import AugmentConfig, LabeledDataset, PreprocessConfig, batches
from .nn import Network
from .optim import Adam, ClassificationReport, TrainingError, bce_loss, classification_report
from .tensor import SeededRng
from .vgg import dump_archive, load_tensors, parse_archive

log = logging.getLogger(__name__)

CSV_HEADER = "epoch,train_loss,train_acc,train_prec,train_rec,val_loss,val_acc,val_prec,val_rec"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 20
    learning_rate: float = 1e-4
    patience: int = 2
    seed: int = 0
    freeze_backbone: bool = True
    augment: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    train_prec: float
    train_rec: float
    val_loss: float
    val_acc: float
    val_prec: float
    val_rec: float

    def csv_row(self) -> str:
        vals = [f"{getattr(self, f.name):.6f}" for f in fields(self)[1:]]
        return ",".join([str(self.epoch)] + vals)


@dataclass
class Checkpoint:
    epoch: int
    archive: bytes
    val_loss: float


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    best_epoch: int  # 1-based


def early_stop_decision(val_loss_history: Sequence[float], patience: int) -> StopDecision:
    """Stop once ``patience`` epochs have passed without a strictly lower loss."""
    if not val_loss_history:
        raise ValueError("validation loss history is empty")
    best = int(np.argmin(val_loss_history))  # earliest minimum wins ties
    since = len(val_loss_history) - 1 - best
    return StopDecision(since >= patience, best + 1)


def stats_csv(stats: Sequence[EpochStats]) -> str:
    return "\n".join([CSV_HEADER] + [s.csv_row() for s in stats]) + "\n"


def write_stats_csv(stats: Sequence[EpochStats], path) -> None:
    Path(path).write_text(stats_csv(stats))


def _positive_metrics(report: ClassificationReport, positive: str) -> Tuple[float, float]:
    m = report.classes[positive]
    return m.precision, m.recall


def predict_proba(net: Network, ds: LabeledDataset, preprocess_config: PreprocessConfig,
                  batch_size: int = 32) -> Tuple[np.ndarray, np.ndarray]:
    """Positive-class probabilities and 0/1 labels for ``ds`` in dataset order (eval mode)."""
    ps, ys = [], []
    for x, y in batches(ds, batch_size, None, preprocess_config):
        ps.append(net.forward(x, "eval").reshape(-1))
        ys.append(y)
    return np.concatenate(ps), np.concatenate(ys)


def evaluate(net: Network, ds: LabeledDataset, threshold: float = 0.5,
             preprocess_config: Optional[PreprocessConfig] = None,
             batch_size: int = 32) -> Tuple[ClassificationReport, float]:
    """Eval-mode report and mean loss; ``p >= threshold`` predicts the second class."""
    if not len(ds):
        raise ValueError("cannot evaluate an empty dataset")
    if len(ds.class_names) != 2:
        raise ValueError(f"binary dataset required, got classes {ds.class_names}")
    pre = preprocess_config or PreprocessConfig(target_size=net.input_shape[1])
    p, y = predict_proba(net, ds, pre, batch_size)
    loss, _ = bce_loss(y, p)
    pred = (p >= threshold).astype(int)
    names = ds.class_names
    report = classification_report([names[int(i)] for i in y], [names[i] for i in pred], names)
    return report, loss


Validator = Callable[[Network, LabeledDataset], Tuple[ClassificationReport, float]]


def run_training(net: Network, train_ds: LabeledDataset, val_ds: LabeledDataset,
                 config: TrainConfig = TrainConfig(),
                 preprocess_config: Optional[PreprocessConfig] = None,
                 augment_config: Optional[AugmentConfig] = None,
                 validate: Optional[Validator] = None) -> Tuple[Network, List[EpochStats]]:
    """Train ``net`` (which must end in a scalar sigmoid) and restore its best epoch.

    Every epoch runs a shuffled, optionally augmented pass with BCE + Adam,
    then an eval-mode validation pass. Training stops after ``max_epochs`` or
    once validation loss has not strictly improved for ``patience`` epochs,
    and the weights of the lowest-validation-loss epoch are put back.
    ``validate`` replaces the default :func:`evaluate` call.
    """
    for ds in (train_ds, val_ds):
        if len(ds.class_names) != 2:
            raise ValueError(f"binary dataset required, got classes {ds.class_names}")
    pre = preprocess_config or PreprocessConfig(target_size=net.input_shape[1])
    aug = (augment_config or AugmentConfig()) if config.augment else None
    validate = validate or (lambda n, ds: evaluate(n, ds, preprocess_config=pre,
                                                   batch_size=config.batch_size))
    names = train_ds.class_names
    seeds = SeededRng(config.seed)
    net.rng = seeds.spawn(0)
    opt = Adam(lr=config.learning_rate)
    stats: List[EpochStats] = []
    history: List[float] = []
    best: Optional[Checkpoint] = None

    for epoch in range(1, config.max_epochs + 1):
        shuffle_seed = seeds.spawn(epoch).seed
        total, true, pred = 0.0, [], []
        for b, (x, y) in enumerate(batches(train_ds, config.batch_size, shuffle_seed, pre, aug)):
            x = x.astype(_param_dtype(net), copy=False)
            out = net.forward(x, "train")
            loss, grad = bce_loss(y, out.reshape(-1))
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            net.zero_grad()
            net.backward(grad.reshape(out.shape).astype(out.dtype), input_grad=False)
            opt.step(net)
            total += loss * len(y)
            true += [names[int(i)] for i in y]
            pred += [names[int(v >= 0.5)] for v in out.reshape(-1)]
        train_report = classification_report(true, pred, names)
        val_report, val_loss = validate(net, val_ds)
        history.append(val_loss)
        st = EpochStats(epoch, total / len(true), train_report.accuracy,
                        *_positive_metrics(train_report, names[1]),
                        val_loss, val_report.accuracy, *_positive_metrics(val_report, names[1]))
        stats.append(st)
        log.info("epoch %d: train_loss=%.4f train_acc=%.4f val_loss=%.4f val_acc=%.4f",
                 epoch, st.train_loss, st.train_acc, st.val_loss, st.val_acc)

        decision = early_stop_decision(history, config.patience)
        if decision.best_epoch == epoch:
            best = Checkpoint(epoch, dump_archive(OrderedDict(net.named_params())), val_loss)
        if decision.stop:
            log.info("early stop after epoch %d; best epoch %d", epoch, decision.best_epoch)
            break

    if best is not None:
        load_tensors(net, parse_archive(best.archive, f"checkpoint@{best.epoch}"))
    return net, stats


def _param_dtype(net: Network):
    for _, p in net.named_params():
        return p.dtype
    return np.float32

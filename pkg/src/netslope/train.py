"""SGD-with-momentum training with per-epoch slope tracking.

The protocol: momentum 0.8, batch size 64, learning rate 0.001, classical
heavy-ball updates (v <- mu v + g, theta <- theta - lr v).  A fixed slope
sample is drawn from the training set once at the start of the run and the
mean slope over it is recorded every epoch; the optimal model is the
checkpoint at the epoch of minimum validation loss (earliest on ties).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from netslope.linalg import as_p
from netslope.nn import (
    Network,
    _batch_softmax_xent,
    batch_gradients,
    forward_many,
    save_network,
)
from netslope.slope import mean_slope


class TrainingDivergedError(RuntimeError):
    """Raised when a batch loss stops being finite; aborts the run."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.8
    batch_size: int = 64
    epochs: int = 150
    seed: int = 0
    slope_sample_size: int = 750
    p: float = 2.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.slope_sample_size < 1:
            raise ValueError("slope_sample_size must be positive")
        object.__setattr__(self, "p", as_p(self.p))


@dataclass(frozen=True)
class EpochRecord:
    """One row of the training log; epoch 0 is the initialization snapshot."""

    epoch: int
    train_loss: float | None
    val_loss: float
    val_acc: float
    val_loss_table_scale: float
    slope_mean: float
    slope_std: float
    slope_min: float
    slope_q25: float
    slope_median: float
    slope_q75: float
    slope_max: float


@dataclass
class TrainLog:
    """Per-epoch metrics plus the initialization snapshot.

    ``epochs`` holds one record per completed epoch (empty for a 0-epoch
    run); ``initial`` is the epoch-0 snapshot kept separately so growth
    checks always have a baseline.  ``optimal_epoch`` is the earliest epoch
    attaining the minimum validation loss, or 0 when no epochs ran.
    """

    config: dict
    initial: EpochRecord
    epochs: list[EpochRecord]
    optimal_epoch: int

    def to_jsonl(self, path) -> None:
        lines = [json.dumps({"config": self.config, "optimal_epoch": self.optimal_epoch},
                            sort_keys=True, separators=(",", ":"))]
        for record in [self.initial] + self.epochs:
            lines.append(json.dumps(asdict(record), sort_keys=True, separators=(",", ":")))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_jsonl(cls, path) -> "TrainLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        head = json.loads(lines[0])
        records = [EpochRecord(**json.loads(line)) for line in lines[1:] if line]
        return cls(head["config"], records[0], records[1:], head["optimal_epoch"])


@dataclass
class MomentumState:
    """Heavy-ball velocity buffers, one per parameter array."""

    weight_velocity: list[np.ndarray]
    bias_velocity: list[np.ndarray]

    @classmethod
    def zeros(cls, net: Network) -> "MomentumState":
        return cls(
            [np.zeros_like(w) for w in net.weights],
            [np.zeros_like(b) for b in net.biases],
        )


def _as_xy(dataset) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(dataset, "x") and hasattr(dataset, "y"):
        x, y = dataset.x, dataset.y
    else:
        x, y = dataset
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise ValueError("dataset must be nonempty with matching points and labels")
    return x, y


def sgd_step(net: Network, batch_x, batch_labels, state: MomentumState, cfg: TrainConfig):
    """One heavy-ball step on the mean-batch gradient.

    v <- momentum * v + g;  theta <- theta - lr * v.  Returns the updated
    network, the updated state and the pre-update mean batch loss.
    """
    wgrads, bgrads, loss = batch_gradients(net, batch_x, batch_labels)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite batch loss {loss}")
    new_wv = [cfg.momentum * v + g for v, g in zip(state.weight_velocity, wgrads)]
    new_bv = [cfg.momentum * v + g for v, g in zip(state.bias_velocity, bgrads)]
    new_weights = tuple(w - cfg.learning_rate * v for w, v in zip(net.weights, new_wv))
    new_biases = tuple(b - cfg.learning_rate * v for b, v in zip(net.biases, new_bv))
    return (
        Network(net.spec, new_weights, new_biases, seed=net.seed),
        MomentumState(new_wv, new_bv),
        loss,
    )


def evaluate(net: Network, dataset, chunk: int = 1024) -> tuple[float, float]:
    """Mean per-sample softmax cross-entropy and argmax accuracy."""
    x, y = _as_xy(dataset)
    loss_sum = 0.0
    correct = 0
    for start in range(0, x.shape[0], chunk):
        logits = forward_many(net, x[start:start + chunk])
        labels = y[start:start + chunk]
        losses, _ = _batch_softmax_xent(logits, labels)
        loss_sum += float(losses.sum())
        correct += int((logits.argmax(axis=1) == labels).sum())
    return loss_sum / x.shape[0], correct / x.shape[0]


def _epoch_record(net, epoch, train_loss, val_set, slope_points, cfg, n_threads):
    val_loss, val_acc = evaluate(net, val_set)
    report = mean_slope(net, slope_points, cfg.p, n_threads=n_threads)
    stats = report.summary()
    return EpochRecord(
        epoch=epoch,
        train_loss=train_loss,
        val_loss=val_loss,
        val_acc=val_acc,
        val_loss_table_scale=val_loss / cfg.batch_size,
        slope_mean=stats["mean"],
        slope_std=stats["std"],
        slope_min=stats["min"],
        slope_q25=stats["q25"],
        slope_median=stats["median"],
        slope_q75=stats["q75"],
        slope_max=stats["max"],
    )


def train(
    net: Network,
    train_set,
    val_set,
    cfg: TrainConfig,
    checkpoint_dir=None,
    n_threads: int = 1,
    on_epoch=None,
):
    """Train with SGD+momentum; returns (TrainLog, optimal network, final network).

    Shuffling and the fixed slope sample are driven by ``cfg.seed`` (sample
    drawn first, then one permutation per epoch), so identical inputs give
    bitwise-identical logs.  With ``checkpoint_dir`` set, the optimal and
    final networks are persisted there as ``optimal.ckpt``/``final.ckpt``.
    ``on_epoch`` is called with each completed :class:`EpochRecord`.
    """
    x_train, y_train = _as_xy(train_set)
    x_val, y_val = _as_xy(val_set)
    n_train = x_train.shape[0]

    rng = np.random.default_rng(cfg.seed)
    sample_size = min(cfg.slope_sample_size, n_train)
    sample_idx = rng.choice(n_train, size=sample_size, replace=False)
    slope_points = x_train[sample_idx]

    log_config = {**asdict(cfg), "p": ("inf" if np.isinf(cfg.p) else cfg.p)}
    initial = _epoch_record(net, 0, None, (x_val, y_val), slope_points, cfg, n_threads)

    best_net, best_loss, best_epoch = net, float("inf"), 0
    state = MomentumState.zeros(net)
    records: list[EpochRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n_train)
        loss_sum = 0.0
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            try:
                net, state, loss = sgd_step(net, x_train[idx], y_train[idx], state, cfg)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(
                    f"epoch {epoch}, batch at offset {start}: {exc}"
                ) from None
            loss_sum += loss * idx.size
        record = _epoch_record(
            net, epoch, loss_sum / n_train, (x_val, y_val), slope_points, cfg, n_threads
        )
        records.append(record)
        if record.val_loss < best_loss:
            best_net, best_loss, best_epoch = net, record.val_loss, epoch
        if on_epoch is not None:
            on_epoch(record)

    log = TrainLog(log_config, initial, records, best_epoch)
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        save_network(best_net, checkpoint_dir / "optimal.ckpt")
        save_network(net, checkpoint_dir / "final.ckpt")
        log.to_jsonl(checkpoint_dir / "trainlog.jsonl")
    return log, best_net, net

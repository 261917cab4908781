"""Mini-batch training loop for both branches, task losses, optimizers,
early stopping, and a logistic-regression reference baseline.

One optimizer step consumes the mean of per-sample gradients, accumulated
on the shared parameter leaves across a batch. Runs are deterministic
under the configured seed (shuffling and dropout draw from one stream).
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics as mx
from .autodiff import Node, ParamStore
from .model import ModelConfig, TSCANModel
from .pipeline import Sample

PROB_CLAMP = 1e-12


class DivergenceError(RuntimeError):
    """Loss became NaN/Inf; reports where."""

    def __init__(self, epoch: int, batch: int) -> None:
        super().__init__(f"loss diverged at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stop_patience: int = 5
    seed: int = 0
    class_weight: float | None = None  # None: negatives/positives on train

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got "
                             f"{self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got "
                             f"{self.optimizer!r}")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate,
                "optimizer": self.optimizer, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps,
                "early_stop_patience": self.early_stop_patience,
                "seed": self.seed, "class_weight": self.class_weight}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss(probs: Node, y, task: str, class_weight: float = 1.0) -> Node:
    """Differentiable scalar distance between predicted probabilities and
    the label: weighted binary cross-entropy for the binary tasks, 10-class
    cross-entropy for stay length, mean per-label binary cross-entropy for
    phenotypes. Probabilities are clamped at 1e-12 before the log."""
    logp = ad.log(ad.clamp_min(probs, PROB_CLAMP))
    if task in ("ihm", "decompensation"):
        y = int(y)
        weights = np.zeros(probs.shape[-1])
        weights[y] = class_weight if y == 1 else 1.0
        return ad.neg(ad.sum(ad.mul(logp, ad.constant(weights))))
    if task == "los":
        onehot = np.zeros(probs.shape[-1])
        onehot[int(y)] = 1.0
        return ad.neg(ad.sum(ad.mul(logp, ad.constant(onehot))))
    if task == "phenotype":
        y = np.asarray(y, dtype=np.float64)
        log1mp = ad.log(ad.clamp_min(ad.add(ad.neg(probs), 1.0), PROB_CLAMP))
        pos = ad.mul(logp, ad.constant(y * class_weight))
        neg = ad.mul(log1mp, ad.constant(1.0 - y))
        return ad.neg(ad.mean(ad.add(pos, neg)))
    raise ValueError(f"unknown task {task!r}")


def auto_class_weight(samples, task: str) -> float:
    """Positive-class weight = negatives / positives on the training split."""
    if task not in ("ihm", "decompensation", "phenotype"):
        return 1.0
    ys = np.asarray([s.y for s in samples], dtype=np.float64)
    pos = ys.sum()
    neg = ys.size - pos
    if pos == 0 or neg == 0:
        return 1.0
    return float(neg / pos)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Sgd:
    def __init__(self, store: ParamStore, learning_rate: float) -> None:
        self.store = store
        self.lr = learning_rate

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            self.store.assign(name, self.store[name].data - self.lr * g)


class Adam:
    """Adaptive moments with bias correction."""

    def __init__(self, store: ParamStore, learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8) -> None:
        self.store = store
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros(node.shape) for name, node in store.items()}
        self.v = {name: np.zeros(node.shape) for name, node in store.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.store.assign(name, self.store[name].data - update)


def make_optimizer(store: ParamStore, config: TrainConfig):
    if config.optimizer == "sgd":
        return Sgd(store, config.learning_rate)
    return Adam(store, config.learning_rate, config.beta1, config.beta2,
                config.eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    metric_name: str
    mode: str  # "max" | "min"
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def record(self, epoch: int, train_loss: float, val_metric: float,
               wall_time: float) -> None:
        self.epochs.append({"epoch": epoch, "train_loss": train_loss,
                            "val_metric": val_metric, "wall_time": wall_time})

    def best_metric(self) -> float:
        return self.epochs[self.best_epoch]["val_metric"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["epoch", "train_loss",
                         f"val_{self.metric_name}", "wall_time", "best"])
        for row in self.epochs:
            writer.writerow([row["epoch"], f"{row['train_loss']:.8f}",
                             f"{row['val_metric']:.8f}",
                             f"{row['wall_time']:.3f}",
                             int(row["epoch"] == self.best_epoch)])
        return buf.getvalue()


TASK_VAL_METRIC = {"ihm": ("auc_roc", "max"), "decompensation": ("auc_roc", "max"),
                   "los": ("kappa", "max"), "phenotype": ("macro_auc", "max")}


def validation_metric(model: TSCANModel, samples: list[Sample]) -> float:
    task = model.config.task
    probs = model.predict_many([s.x for s in samples])
    labels = [s.y for s in samples]
    if task in ("ihm", "decompensation"):
        return mx.auc_roc(probs[:, 1], labels)
    if task == "los":
        return mx.kappa_linear(probs.argmax(axis=1), labels)
    macro, _ = mx.macro_micro_auc(probs, np.asarray(labels))
    return macro


def should_stop(epochs_since_best: int, patience: int) -> bool:
    return epochs_since_best >= patience


@dataclass
class TrainResult:
    model: TSCANModel
    log: TrainLog


def train(train_samples: list[Sample], val_samples: list[Sample],
          model_config: ModelConfig, train_config: TrainConfig) -> TrainResult:
    """Run the nested epoch/batch loops: both branch forwards, fused
    prediction, loss, backward, optimizer step; keep the parameters of the
    best validation epoch and stop after ``early_stop_patience`` epochs
    without improvement."""
    rng = np.random.default_rng(train_config.seed)
    model = TSCANModel(model_config, seed=train_config.seed)
    optimizer = make_optimizer(model.params, train_config)
    weight = (train_config.class_weight
              if train_config.class_weight is not None
              else auto_class_weight(train_samples, model_config.task))
    metric_name, mode = TASK_VAL_METRIC[model_config.task]
    log = TrainLog(metric_name=metric_name, mode=mode)
    best_value: float | None = None
    best_params: dict[str, np.ndarray] | None = None
    sign = 1.0 if mode == "max" else -1.0

    order = np.arange(len(train_samples))
    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        rng.shuffle(order)
        epoch_loss = 0.0
        for b_start in range(0, len(order), train_config.batch_size):
            batch = order[b_start:b_start + train_config.batch_size]
            model.params.zero_grads()
            batch_loss = 0.0
            for idx in batch:
                s = train_samples[idx]
                result = model.forward(s.x, train=True, rng=rng)
                sample_loss = loss(result.probs, s.y, model_config.task, weight)
                value = float(sample_loss.data)
                if not np.isfinite(value):
                    raise DivergenceError(epoch, b_start // train_config.batch_size)
                batch_loss += value
                ad.backward(sample_loss)
            k = len(batch)
            grads = {name: node.grad / k
                     for name, node in model.params.items()
                     if node.grad is not None}
            optimizer.step(grads)
            epoch_loss += batch_loss
        val_value = validation_metric(model, val_samples)
        log.record(epoch, epoch_loss / len(order), val_value,
                   time.perf_counter() - t0)
        if best_value is None or sign * val_value > sign * best_value:
            best_value = val_value
            best_params = model.params.copy_values()
            log.best_epoch = epoch
        elif should_stop(epoch - log.best_epoch, train_config.early_stop_patience):
            log.stopped_early = True
            break
    if best_params is not None:
        model.params.load_values(best_params)
    return TrainResult(model=model, log=log)


# ---------------------------------------------------------------------------
# logistic-regression baseline
# ---------------------------------------------------------------------------

def summary_features(samples: list[Sample]) -> np.ndarray:
    """Per-sample summaries of each feature column over the window:
    mean, min, max, and last value."""
    feats = []
    for s in samples:
        x = s.x
        feats.append(np.concatenate([x.mean(axis=0), x.min(axis=0),
                                     x.max(axis=0), x[-1]]))
    return np.asarray(feats)


def _fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = 1e-3,
                  iters: int = 500, lr: float = 0.5) -> np.ndarray:
    """Full-batch gradient descent on L2-regularized logistic loss;
    weights vector includes the (unregularized) intercept last."""
    xb = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    w = np.zeros(xb.shape[1])
    for _ in range(iters):
        z = xb @ w
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
        grad = xb.T @ (p - y) / len(y)
        grad[:-1] += l2 * w[:-1]
        w -= lr * grad
    return w


def _predict_logistic(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    xb = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    return 1.0 / (1.0 + np.exp(-np.clip(xb @ w, -500, 500)))


@dataclass
class BaselineResult:
    weights: np.ndarray  # (n_labels, n_features + 1)
    metrics: mx.EvalResult
    feature_stats: tuple[np.ndarray, np.ndarray]


def logistic_baseline(train_samples: list[Sample], eval_samples: list[Sample],
                      task: str) -> BaselineResult:
    """L2-regularized logistic regression on window summary features;
    multi-label tasks get independent per-label fits. Reports the same
    metric battery as the network on ``eval_samples``."""
    if task == "los":
        raise ValueError("logistic baseline covers binary and multi-label tasks")
    if not train_samples:
        raise ValueError("empty training set")
    x_train = summary_features(train_samples)
    x_eval = summary_features(eval_samples)
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0)
    sd[sd < 1e-9] = 1.0
    x_train = (x_train - mu) / sd
    x_eval = (x_eval - mu) / sd
    if task == "phenotype":
        y_train = np.asarray([s.y for s in train_samples], dtype=np.float64)
        y_eval = np.asarray([s.y for s in eval_samples])
        weights = np.stack([_fit_logistic(x_train, y_train[:, k])
                            for k in range(y_train.shape[1])])
        probs = np.stack([_predict_logistic(w, x_eval) for w in weights], axis=1)
        return BaselineResult(weights, mx.evaluate_task(task, probs, y_eval),
                              (mu, sd))
    y_train = np.asarray([s.y for s in train_samples], dtype=np.float64)
    y_eval = np.asarray([s.y for s in eval_samples])
    w = _fit_logistic(x_train, y_train)
    p1 = _predict_logistic(w, x_eval)
    probs = np.stack([1.0 - p1, p1], axis=1)
    return BaselineResult(w[None, :], mx.evaluate_task(task, probs, y_eval),
                          (mu, sd))

"""AdamW with warmup+cosine schedule, training loop, metrics and the ablation runner."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig, VARIANTS
from .data import CLASS_NAMES, DatasetArrays
from .errors import ConfigMismatch, InvalidStep, NumericError
from .fusion import MMGCNet
from .nn import Parameter

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    peak: float
    warmup: int
    total: int

    def __post_init__(self):
        if not 0 <= self.warmup <= self.total:
            raise InvalidStep(f"need 0 <= warmup <= total, got warmup={self.warmup}, total={self.total}")

    def lr_at(self, step: int) -> float:
        """Linear warmup to ``peak``, then half-cosine decay to 0 at ``total``."""
        if not 0 <= step <= self.total:
            raise InvalidStep(f"step {step} outside [0, {self.total}]")
        if step < self.warmup:
            return self.peak * step / self.warmup
        progress = (step - self.warmup) / max(1, self.total - self.warmup)
        return self.peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_at(sched: Schedule, step: int) -> float:
    return sched.lr_at(step)


class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    ``w <- w - lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * w``;
    gradients are cleared after every step.
    """

    def __init__(self, params: list[Parameter], weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError("non-finite gradient reached the optimizer")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps) + (lr * self.weight_decay) * p.data
            p.data -= update.astype(p.data.dtype, copy=False)
            p.grad = None


def adamw_step(opt: AdamW, lr: float) -> None:
    opt.step(lr)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def confusion_matrix(y_true, y_pred, n_classes: int = 2) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    recall_per_class: dict[str, float]
    precision_per_class: dict[str, float] = field(default_factory=dict)
    f1_per_class: dict[str, float] = field(default_factory=dict)
    n: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def metrics_from_confusion(cm: np.ndarray, average: str = "macro") -> MetricsReport:
    """Class metrics from a confusion matrix; undefined ratios count as 0.

    Ratios are exact fractions until the final rounding so that results do not
    depend on summation order.
    """
    k = cm.shape[0]
    total = int(cm.sum())
    tp = [int(cm[c, c]) for c in range(k)]
    support = [int(cm[c, :].sum()) for c in range(k)]
    predicted = [int(cm[:, c].sum()) for c in range(k)]
    prec = [_ratio(tp[c], predicted[c]) for c in range(k)]
    rec = [_ratio(tp[c], support[c]) for c in range(k)]
    f1 = [_ratio(2 * tp[c], support[c] + predicted[c]) for c in range(k)]
    accuracy = _ratio(sum(tp), total)
    if average == "macro":
        agg = [sum(vals, Fraction(0)) / k for vals in (prec, rec, f1)]
    elif average == "weighted":
        agg = [_weighted(vals, support, total) for vals in (prec, rec, f1)]
    elif average == "micro":
        agg = [accuracy] * 3
    else:
        raise ValueError(f"unknown averaging {average!r}")
    names = CLASS_NAMES if k == len(CLASS_NAMES) else tuple(str(c) for c in range(k))
    return MetricsReport(
        accuracy=float(accuracy),
        precision=float(agg[0]),
        recall=float(agg[1]),
        f1=float(agg[2]),
        recall_per_class={names[c]: float(rec[c]) for c in range(k)},
        precision_per_class={names[c]: float(prec[c]) for c in range(k)},
        f1_per_class={names[c]: float(f1[c]) for c in range(k)},
        n=total,
    )


def _weighted(values, support, total) -> Fraction:
    if not total:
        return Fraction(0)
    return sum((v * s for v, s in zip(values, support)), Fraction(0)) / total


def compute_metrics(y_true, y_pred, average: str = "macro", n_classes: int = 2) -> MetricsReport:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, n_classes), average)


@dataclass
class MetricsSummary:
    """Mean and population std of each metric over trials."""

    mean: dict[str, float]
    std: dict[str, float]
    trials: list[MetricsReport]

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "trials": [t.to_dict() for t in self.trials]}


def summarize(reports: list[MetricsReport]) -> MetricsSummary:
    keys = list(METRIC_NAMES) + [f"recall_{c}" for c in CLASS_NAMES]

    def value(r: MetricsReport, key: str) -> float:
        return r.recall_per_class[key[7:]] if key.startswith("recall_") else getattr(r, key)

    mean, std = {}, {}
    for key in keys:
        vals = np.array([value(r, key) for r in reports], dtype=np.float64)
        mean[key] = float(vals.mean())
        std[key] = float(vals.std(ddof=0))
    return MetricsSummary(mean, std, list(reports))


# ---------------------------------------------------------------------------
# forward helpers
# ---------------------------------------------------------------------------


def _batch_inputs(model: MMGCNet, batch: DatasetArrays) -> dict:
    return {
        "images": batch.images if model.uses_image else None,
        "ids": batch.tokens if model.uses_text else None,
        "lengths": batch.lengths if model.uses_text else None,
    }


def check_compatible(model: MMGCNet, data: DatasetArrays) -> None:
    cfg = model.config
    if len(data) == 0:
        return
    c, h, w = data.images.shape[1:]
    if (c, h, w) != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ConfigMismatch(f"images are {c}x{h}x{w}; model expects "
                             f"{cfg.channels}x{cfg.image_size}x{cfg.image_size}")
    if data.tokens.shape[1] > cfg.max_len or data.tokens.max(initial=0) >= cfg.vocab_size:
        raise ConfigMismatch("token ids or sequence length do not fit the model's vocabulary/max_len")


def predict_logits(model: MMGCNet, data: DatasetArrays, batch_size: int = 200) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            batch = data.take(np.arange(start, min(start + batch_size, len(data))))
            out.append(model(**_batch_inputs(model, batch)).prediction.logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def predict(model: MMGCNet, data: DatasetArrays, batch_size: int = 200) -> np.ndarray:
    """Argmax class per sample; ties resolve to class 0."""
    return np.argmax(predict_logits(model, data, batch_size), axis=-1)


def evaluate(model: MMGCNet, data: DatasetArrays, average: str = "macro", batch_size: int = 200) -> MetricsReport:
    check_compatible(model, data)
    return compute_metrics(data.labels, predict(model, data, batch_size), average, model.config.n_classes)


def mean_loss(model: MMGCNet, data: DatasetArrays, batch_size: int = 200) -> float:
    total = 0.0
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            batch = data.take(np.arange(start, min(start + batch_size, len(data))))
            loss = model(**_batch_inputs(model, batch), labels=batch.labels).loss
            total += float(loss.data) * len(batch)
    return total / max(1, len(data))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: MMGCNet
    best_epoch: int
    history: list[dict]
    seed: int
    initial_train_loss: float | None = None


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_data: DatasetArrays,
          val_data: DatasetArrays, seed: int, track_train: bool = False,
          on_epoch: Callable[[dict], None] | None = None, init_params: dict | None = None) -> TrainResult:
    """Seeded training run; returns the model restored to its best-validation-accuracy epoch.

    Ties on validation accuracy keep the earlier epoch.
    """
    model = MMGCNet(dataclasses.replace(model_cfg), seed)
    if init_params is not None:
        load_parameters(model, init_params)
    check_compatible(model, train_data)
    params = model.trainable_parameters()
    opt = AdamW(params, weight_decay=train_cfg.weight_decay)
    shuffle_rng = np.random.default_rng([seed, 1])
    n = len(train_data)
    bs = train_cfg.batch_size
    steps_per_epoch = math.ceil(n / bs)
    total = steps_per_epoch * train_cfg.epochs
    sched = Schedule(train_cfg.effective_lr, int(train_cfg.warmup_frac * total), total)

    initial = mean_loss(model, train_data, train_cfg.eval_batch_size) if track_train else None
    history: list[dict] = []
    best_acc, best_epoch, best_state = -1.0, 0, None
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            batch = train_data.take(order[start : start + bs])
            out = model(**_batch_inputs(model, batch), labels=batch.labels)
            out.loss.backward()
            step += 1
            opt.step(sched.lr_at(step))
            losses.append(float(out.loss.data) * len(batch))
        record = {"epoch": epoch, "train_loss": sum(losses) / n, "lr": sched.lr_at(step)}
        val = evaluate(model, val_data, train_cfg.average, train_cfg.eval_batch_size) if len(val_data) else None
        if val is not None:
            record["val"] = val.to_dict()
        if track_train:
            record["train_eval_loss"] = mean_loss(model, train_data, train_cfg.eval_batch_size)
            record["train_accuracy"] = evaluate(model, train_data, train_cfg.average,
                                                train_cfg.eval_batch_size).accuracy
        history.append(record)
        acc = val.accuracy if val is not None else -float(record["train_loss"])
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best_state = {name: p.data.copy() for name, p in model.named_parameters()}
        log.info("epoch %d loss %.4f val_acc %s", epoch, record["train_loss"],
                 f"{val.accuracy:.4f}" if val else "n/a")
        if on_epoch is not None:
            on_epoch(record)
    load_parameters(model, best_state)
    return TrainResult(model, best_epoch, history, seed, initial)


def load_parameters(model: MMGCNet, state: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    if set(params) != set(state):
        missing = sorted(set(params) ^ set(state))
        raise ConfigMismatch(f"parameter names differ from the model architecture: {missing[:5]}")
    for name, p in params.items():
        arr = np.asarray(state[name])
        if arr.shape != p.shape:
            raise ConfigMismatch(f"{name}: shape {arr.shape} != {p.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)


# ---------------------------------------------------------------------------
# trials and ablation
# ---------------------------------------------------------------------------


@dataclass
class TrialOutcome:
    variant: str
    seed: int
    best_epoch: int
    test: MetricsReport
    history: list[dict]


def run_trial(model_cfg: ModelConfig, train_cfg: TrainConfig, train_data: DatasetArrays,
              val_data: DatasetArrays, test_data: DatasetArrays, variant: str, seed: int) -> TrialOutcome:
    cfg = dataclasses.replace(model_cfg, variant=variant)
    result = train(cfg, train_cfg, train_data, val_data, seed)
    report = evaluate(result.model, test_data, train_cfg.average, train_cfg.eval_batch_size)
    return TrialOutcome(variant, seed, result.best_epoch, report, result.history)


def _run_trial_job(args) -> TrialOutcome:
    return run_trial(*args)


def run_trials(model_cfg: ModelConfig, train_cfg: TrainConfig, train_data: DatasetArrays,
               val_data: DatasetArrays, test_data: DatasetArrays, variant: str,
               n_trials: int | None = None, base_seed: int = 0, jobs: int = 1) -> tuple[MetricsSummary, list[TrialOutcome]]:
    """Independent trials with seeds base_seed .. base_seed+n-1, summarized on the test part."""
    n_trials = train_cfg.trials if n_trials is None else n_trials
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    jobs_args = [(model_cfg, train_cfg, train_data, val_data, test_data, variant, base_seed + i)
                 for i in range(n_trials)]
    outcomes = _map(jobs_args, jobs)
    return summarize([o.test for o in outcomes]), outcomes


def run_ablation(model_cfg: ModelConfig, train_cfg: TrainConfig, train_data: DatasetArrays,
                 val_data: DatasetArrays, test_data: DatasetArrays, n_trials: int | None = None,
                 base_seed: int = 0, jobs: int = 1) -> dict[str, tuple[MetricsSummary, list[TrialOutcome]]]:
    """m1/m2/m3 on identical data and seeds; results keyed by variant in that order."""
    n_trials = train_cfg.trials if n_trials is None else n_trials
    jobs_args = [(model_cfg, train_cfg, train_data, val_data, test_data, v, base_seed + i)
                 for v in VARIANTS for i in range(n_trials)]
    outcomes = _map(jobs_args, jobs)
    table = {}
    for v in VARIANTS:
        runs = [o for o in outcomes if o.variant == v]
        table[v] = (summarize([o.test for o in runs]), runs)
    return table


def _map(jobs_args: list, jobs: int) -> list[TrialOutcome]:
    if jobs <= 1 or len(jobs_args) <= 1:
        return [_run_trial_job(a) for a in jobs_args]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        # map preserves submission order, so merging is deterministic
        return list(pool.map(_run_trial_job, jobs_args))

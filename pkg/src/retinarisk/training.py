"""Multi-task loss, the training loop, splits, cross-validation and ablations."""

from __future__ import annotations

import copy
import dataclasses
import enum
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset
from .evalsuite import MetricsReport, metrics_report
from .fusion import FusionModel, McPrediction, ModelConfig, mc_predict
from .numerics import AdamState, ConfigurationError, OptimConfig, Tensor, adam_step, log_softmax
from .preprocess import PreprocessConfig, augment

PROB_FLOOR = 1e-12


class SplitError(ValueError):
    pass


class TrainingDivergence(FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass(frozen=True)
class LossConfig:
    alpha: tuple[float, ...] = (0.2, 0.25, 0.2, 0.2, 0.15)
    gamma: float = 2.0
    lambda_mse: float = 0.5

    def __post_init__(self):
        if any(a <= 0 for a in self.alpha):
            raise ConfigurationError("focal alpha entries must be positive")
        if self.gamma < 0:
            raise ConfigurationError("focal gamma must be non-negative")
        if self.lambda_mse < 0:
            raise ConfigurationError("lambda_mse must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    early_stop_patience: int = 5
    lr_reduce_factor: float = 0.5
    lr_reduce_patience: int = 3
    split: tuple[float, float, float] = (0.70, 0.10, 0.20)
    seed: int = 0
    augment: bool = True
    balance: bool = True
    # optional global multiplier applied every ``decay_every`` epochs (off by default)
    decay_factor: float | None = None
    decay_every: int = 10
    mc_samples: int = 50

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.early_stop_patience < 1 or self.lr_reduce_patience < 1:
            raise ConfigurationError("patience values must be positive")
        if not 0.0 < self.lr_reduce_factor <= 1.0:
            raise ConfigurationError("lr_reduce_factor must lie in (0, 1]")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigurationError("split fractions must be three non-negative reals summing to 1")
        if self.decay_factor is not None and not 0.0 < self.decay_factor <= 1.0:
            raise ConfigurationError("decay_factor must lie in (0, 1]")
        if self.mc_samples < 2:
            raise ConfigurationError("mc_samples must be at least 2")


# ---------------------------------------------------------------- losses

def focal_loss(probs, true_class: int, cfg: LossConfig) -> float:
    """-alpha_c (1 - p_c)^gamma ln p_c for one sample (p_c clamped at 1e-12).

    The leading minus makes the loss non-negative.
    """
    p = max(float(np.asarray(probs, dtype=np.float64)[true_class]), PROB_FLOOR)
    return -cfg.alpha[true_class] * (1.0 - p) ** cfg.gamma * math.log(p)


def focal_loss_tensor(logits: Tensor, labels: np.ndarray, cfg: LossConfig) -> Tensor:
    """Mean focal loss over a batch of logits ``[B, C]``."""
    labels = np.asarray(labels, dtype=int)
    logp = log_softmax(logits, axis=-1)[np.arange(labels.size), labels].clip_min(math.log(PROB_FLOOR))
    p = logp.exp()
    alpha = np.asarray(cfg.alpha, dtype=np.float64)[labels]
    return -((1.0 - p) ** cfg.gamma * logp * alpha).mean()


def total_loss(logits: Tensor, risk_pred: Tensor, labels, risks, cfg: LossConfig) -> Tensor:
    """Mean focal + lambda * mean squared risk error (rows without a risk label skip the MSE)."""
    labels = np.asarray(labels)
    risks = np.asarray(risks, dtype=np.float64)
    if logits.shape[0] != labels.size or risk_pred.shape[0] != risks.size or labels.size != risks.size:
        raise ValueError("predictions and labels differ in batch size")
    loss = focal_loss_tensor(logits, labels, cfg)
    known = np.isfinite(risks)
    if cfg.lambda_mse > 0 and known.any():
        idx = np.nonzero(known)[0]
        diff = risk_pred[idx] - risks[idx].astype(risk_pred.data.dtype)
        loss = loss + cfg.lambda_mse * (diff * diff).mean()
    return loss


# ---------------------------------------------------------------- splits

def _allocate(n: int, fractions: Sequence[float], debt: np.ndarray | None = None) -> list[int]:
    """Round ``fractions * n`` to integers summing to ``n``.

    Only parts with a fractional remainder round up, so each stays within one item of its share.
    ``debt`` (running shortfall per part) decides which ones; without it the largest remainder wins.
    """
    raw = np.asarray(fractions, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    frac = raw - counts
    rem = n - counts.sum()
    priority = frac + (0.0 if debt is None else debt)
    candidates = [i for i in np.argsort(-priority, kind="stable") if frac[i] > 1e-12]
    counts[candidates[:rem]] += 1
    return counts.tolist()


def stratified_split(labels, fractions: Sequence[float] = (0.7, 0.1, 0.2),
                     seed: int = 0) -> tuple[list[int], ...]:
    """Per-class shuffled apportionment; each split is within one sample of its share per class.

    Rounding carries over between classes so small classes do not all round the same split to zero.
    """
    labels = np.asarray(labels)
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise SplitError("fractions must be non-negative and sum to 1")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in fractions]
    debt = np.zeros(len(fractions))
    for cls in np.unique(labels):
        members = np.nonzero(labels == cls)[0]
        if members.size < 3:
            raise SplitError(f"class {cls} has only {members.size} members; at least 3 are needed "
                             f"(add synthetic samples for this class)")
        members = rng.permutation(members)
        counts = _allocate(members.size, fractions, debt)
        debt += np.asarray(fractions) * members.size - counts
        start = 0
        for part, count in zip(parts, counts):
            part.extend(int(i) for i in members[start:start + count])
            start += count
    return tuple(sorted(p) for p in parts)


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> list[list[int]]:
    """Deal each shuffled class round-robin over the folds, continuing where the last class stopped."""
    labels = np.asarray(labels)
    if k < 2:
        raise SplitError("k must be at least 2")
    classes, counts = np.unique(labels, return_counts=True)
    if k > counts.min():
        raise SplitError(f"k={k} exceeds the smallest class count {counts.min()}")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for cls in classes:
        for i in rng.permutation(np.nonzero(labels == cls)[0]):
            folds[cursor % k].append(int(i))
            cursor += 1
    return [sorted(f) for f in folds]


# ---------------------------------------------------------------- training

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float
    train_acc: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = "max_epochs"
    best_epoch: int = 0
    best_val_loss: float = math.inf

    CSV_HEADER = ("epoch", "train_loss", "val_loss", "val_acc", "lr")

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def learning_rates(self) -> list[float]:
        return [e.lr for e in self.epochs]

    def csv_rows(self) -> list[list]:
        return [[e.epoch, e.train_loss, e.val_loss, e.val_acc, e.lr] for e in self.epochs]

    def to_dict(self) -> dict:
        return {"stop_reason": self.stop_reason, "best_epoch": self.best_epoch,
                "best_val_loss": self.best_val_loss,
                "epochs": [dataclasses.asdict(e) for e in self.epochs]}


@dataclass
class TrainResult:
    history: TrainHistory
    optimizer: AdamState
    best_state: dict[str, np.ndarray]


def snapshot(model: FusionModel) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.named_parameters().items()}


def restore(model: FusionModel, state: dict[str, np.ndarray]) -> None:
    params = model.named_parameters()
    if set(params) != set(state):
        raise ConfigurationError("parameter names differ from the stored state")
    for k, p in params.items():
        if p.data.shape != state[k].shape:
            raise ConfigurationError(f"shape mismatch for {k}")
        p.data = state[k].astype(p.data.dtype, copy=True)


def balanced_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices with minority classes resampled up to the largest class size."""
    classes, counts = np.unique(labels, return_counts=True)
    target = counts.max()
    out = []
    for cls, cnt in zip(classes, counts):
        members = np.nonzero(labels == cls)[0]
        out.append(members)
        if cnt < target:
            out.append(rng.choice(members, size=target - cnt, replace=True))
    return np.concatenate(out)


def evaluate_loss(model: FusionModel, data: Dataset, loss_cfg: LossConfig,
                  batch_size: int = 64) -> tuple[float, float]:
    """Deterministic (dropout off) mean loss and accuracy."""
    total, correct = 0.0, 0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        out = model.forward(data.batch(idx), train=False)
        loss = total_loss(out.logits, out.risk, data.grades[idx], data.risks[idx], loss_cfg)
        total += loss.item() * idx.size
        correct += int(np.sum(out.logits.data.argmax(axis=1) == data.grades[idx]))
    return total / len(data), correct / len(data)


Validator = Callable[[FusionModel, int], tuple[float, float]]


def train(model: FusionModel, train_data: Dataset, val_data: Dataset, cfg: TrainConfig,
          loss_cfg: LossConfig = LossConfig(), optim_cfg: OptimConfig = OptimConfig(),
          pcfg: PreprocessConfig = PreprocessConfig(), validate: Validator | None = None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Mini-batch Adam with plateau LR halving, early stopping, and best-checkpoint retention.

    ``validate(model, epoch)`` may replace the validation pass; it returns
    ``(val_loss, val_acc)``.
    """
    if len(train_data) == 0 or (len(val_data) == 0 and validate is None):
        raise ConfigurationError("train and validation splits must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    params = model.named_parameters()
    state = AdamState()
    lr = optim_cfg.learning_rate
    history = TrainHistory()
    best_state = snapshot(model)
    best_opt = copy.deepcopy(state)
    stall = plateau = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        if cfg.decay_factor is not None and epoch > 1 and (epoch - 1) % cfg.decay_every == 0:
            lr *= cfg.decay_factor
        use_balance = cfg.balance and cfg.augment
        order = balanced_order(train_data.grades, rng) if use_balance else np.arange(len(train_data))
        order = rng.permutation(order)
        run_loss, run_correct = 0.0, 0
        for b, start in enumerate(range(0, order.size, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            images = train_data.images[idx]
            if cfg.augment:
                images = np.stack([augment(img, rng, pcfg) for img in images])
            out = model.forward(train_data.batch(idx, images), train=True, rng=rng)
            loss = total_loss(out.logits, out.risk, train_data.grades[idx], train_data.risks[idx], loss_cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(epoch, b, value)
            model.zero_grad()
            loss.backward()
            adam_step(params, state, optim_cfg, learning_rate=lr)
            run_loss += value * idx.size
            run_correct += int(np.sum(out.logits.data.argmax(axis=1) == train_data.grades[idx]))
        if validate is not None:
            val_loss, val_acc = validate(model, epoch)
        else:
            val_loss, val_acc = evaluate_loss(model, val_data, loss_cfg)
        history.epochs.append(EpochRecord(epoch, run_loss / order.size, float(val_loss), float(val_acc),
                                          lr, run_correct / order.size, time.perf_counter() - t0))
        if log is not None:
            e = history.epochs[-1]
            log(f"epoch={epoch} train_loss={e.train_loss:.5f} val_loss={e.val_loss:.5f} "
                f"val_acc={e.val_acc:.4f} lr={lr:g}")
        if val_loss < history.best_val_loss:
            history.best_val_loss, history.best_epoch = float(val_loss), epoch
            best_state, best_opt = snapshot(model), copy.deepcopy(state)
            stall = plateau = 0
            continue
        stall += 1
        plateau += 1
        if stall >= cfg.early_stop_patience:
            history.stop_reason = "early_stop"
            break
        if plateau >= cfg.lr_reduce_patience:
            lr *= cfg.lr_reduce_factor
            plateau = 0
    restore(model, best_state)
    return TrainResult(history, best_opt, best_state)


# ---------------------------------------------------------------- prediction

@dataclass
class PredictionTable:
    ids: list[str]
    true_grades: np.ndarray
    records: list[McPrediction]
    times: np.ndarray
    events: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return np.stack([r.class_probs for r in self.records])

    @property
    def risk(self) -> np.ndarray:
        return np.array([r.risk for r in self.records])

    @property
    def pred_grades(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    HEADER = ["patient_id", "true_grade", "pred_grade", "p0", "p1", "p2", "p3", "p4", "risk",
              "progression_months", "event", "sigma", "ci_lo", "ci_hi", "tier"]

    def csv_rows(self) -> list[list]:
        rows = []
        for i, rec in enumerate(self.records):
            t = "" if not np.isfinite(self.times[i]) else float(self.times[i])
            e = "" if self.events[i] < 0 else int(self.events[i])
            sig = ["", "", ""] if rec.sigma is None else [rec.sigma, rec.ci95[0], rec.ci95[1]]
            rows.append([self.ids[i], int(self.true_grades[i]), rec.grade, *rec.class_probs.tolist(),
                         rec.risk, t, e, *sig, rec.tier.value])
        return rows

    def report(self) -> MetricsReport:
        return metrics_report(self.true_grades, self.probs, self.risk, self.times, self.events)


def predict_dataset(model: FusionModel, data: Dataset, mc_samples: int = 50, seed: int = 0,
                    bayesian: bool = True) -> PredictionTable:
    """MC prediction per subject; each subject's masks come from ``default_rng(seed)``,
    so a single-image prediction reproduces the dataset path."""
    records = []
    for i in range(len(data)):
        rng = np.random.default_rng(seed)
        records.extend(mc_predict(model, data.batch([i]), mc_samples, rng, bayesian=bayesian))
    return PredictionTable(list(data.ids), data.grades.copy(), records, data.times.copy(), data.events.copy())


# ---------------------------------------------------------------- CV and ablation

def _numeric_summary(reports: Sequence[dict]) -> dict[str, dict[str, float | None]]:
    keys = [k for k, v in reports[0].items() if isinstance(v, (int, float)) or v is None]
    out = {}
    for k in keys:
        vals = [r[k] for r in reports if isinstance(r.get(k), (int, float))]
        out[k] = {"mean": float(np.mean(vals)) if vals else None,
                  "std": float(np.std(vals)) if vals else None}
    return out


@dataclass
class CvResult:
    folds: list[list[int]]
    reports: list[dict]
    summary: dict

    def to_dict(self) -> dict:
        return {"folds": self.folds, "reports": self.reports, "summary": self.summary}


def cross_validate(data: Dataset, k: int, model_cfg: ModelConfig, cfg: TrainConfig,
                   loss_cfg: LossConfig = LossConfig(), optim_cfg: OptimConfig = OptimConfig(),
                   pcfg: PreprocessConfig = PreprocessConfig(),
                   log: Callable[[str], None] | None = None) -> CvResult:
    """Stratified k-fold; every fold starts from the same seed so folds differ only in data."""
    folds = stratified_kfold(data.grades, k, cfg.seed)
    reports = []
    for f, test_idx in enumerate(folds):
        rest = np.array(sorted(set(range(len(data))) - set(test_idx)))
        tr, va, _ = stratified_split(data.grades[rest], (0.9, 0.1, 0.0), cfg.seed)
        model = FusionModel(model_cfg, np.random.default_rng(cfg.seed))
        train(model, data.subset(rest[tr]), data.subset(rest[va]), cfg, loss_cfg, optim_cfg, pcfg)
        table = predict_dataset(model, data.subset(test_idx), cfg.mc_samples, cfg.seed)
        reports.append(table.report().to_dict())
        if log is not None:
            log(f"fold={f} accuracy={reports[-1]['accuracy']:.4f}")
    return CvResult(folds, reports, _numeric_summary(reports))


class AblationVariant(str, enum.Enum):
    FULL = "full"
    NO_VIT = "no_vit"
    NO_GNN = "no_gnn"
    NO_AUGMENTATION = "no_augmentation"
    NO_BAYESIAN = "no_bayesian"


def variant_configs(variant: AblationVariant | str, model_cfg: ModelConfig,
                    cfg: TrainConfig) -> tuple[ModelConfig, TrainConfig, bool]:
    """(model config, train config, bayesian flag) for one variant."""
    try:
        v = AblationVariant(variant)
    except ValueError:
        raise ConfigurationError(f"unknown ablation variant {variant!r}") from None
    if v is AblationVariant.NO_VIT:
        return dataclasses.replace(model_cfg, use_vit=False), cfg, True
    if v is AblationVariant.NO_GNN:
        return dataclasses.replace(model_cfg, use_gnn=False), cfg, True
    if v is AblationVariant.NO_AUGMENTATION:
        return model_cfg, dataclasses.replace(cfg, augment=False, balance=False), True
    if v is AblationVariant.NO_BAYESIAN:
        return model_cfg, cfg, False
    return model_cfg, cfg, True


@dataclass
class AblationResult:
    variant: str
    param_count: int
    fusion_in_dim: int
    report: dict
    history: TrainHistory

    def row(self) -> dict:
        keys = ("accuracy", "qwk", "auc_roc", "c_index")
        return {"variant": self.variant, "param_count": self.param_count,
                "fusion_in_dim": self.fusion_in_dim, **{k: self.report.get(k) for k in keys}}


def ablate(data: Dataset, variant: AblationVariant | str, model_cfg: ModelConfig, cfg: TrainConfig,
           loss_cfg: LossConfig = LossConfig(), optim_cfg: OptimConfig = OptimConfig(),
           pcfg: PreprocessConfig = PreprocessConfig(),
           splits: tuple[Sequence[int], Sequence[int], Sequence[int]] | None = None) -> AblationResult:
    mcfg, tcfg, bayesian = variant_configs(variant, model_cfg, cfg)
    tr, va, te = splits if splits is not None else stratified_split(data.grades, tcfg.split, tcfg.seed)
    model = FusionModel(mcfg, np.random.default_rng(tcfg.seed))
    result = train(model, data.subset(tr), data.subset(va), tcfg, loss_cfg, optim_cfg, pcfg)
    table = predict_dataset(model, data.subset(te), tcfg.mc_samples, tcfg.seed, bayesian)
    return AblationResult(AblationVariant(variant).value, model.num_parameters(), mcfg.fusion_in_dim,
                          table.report().to_dict(), result.history)

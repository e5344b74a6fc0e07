"""Joint steering/speed/scene loss and the supervised training loop."""

from __future__ import annotations

import copy
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .datapipe.record import Dataset
from .datapipe.transforms import AugmentConfig, augment, preprocess, preprocess_labels
from .model import DrivingNet, ModelConfig
from .simworld import V_MAX

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-8


class DivergenceError(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda1: float = 10.0
    lambda2: float = 1.0
    lambda3: float = 2.0
    alpha: float = 5.0
    beta: float = 1.0
    gamma: float = 2.0

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    initial_lr: float = 3e-4
    lr_decay_factor: float = 0.5
    lr_patience_epochs: int = 5
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 20
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if min(self.lr_patience_epochs, self.early_stop_patience, self.batch_size, self.max_epochs) < 1:
            raise ValueError("patience, batch size and epoch budget must be positive")


# --- losses -----------------------------------------------------------------


def _nonempty(t: torch.Tensor, name: str) -> None:
    if t.numel() == 0:
        raise ValueError(f"{name}: empty batch")


def steering_loss(pred, gt, alpha: float = 5.0, beta: float = 1.0, gamma: float = 2.0) -> torch.Tensor:
    """Mean of (1 + alpha |gt|^beta)^gamma (pred - gt)^2."""
    pred, gt = torch.as_tensor(pred), torch.as_tensor(gt)
    _nonempty(gt, "steering_loss")
    weight = (1.0 + alpha * gt.abs() ** beta) ** gamma
    return torch.mean(weight * (pred - gt) ** 2)


def speed_loss(pred, gt) -> torch.Tensor:
    pred, gt = torch.as_tensor(pred), torch.as_tensor(gt)
    _nonempty(gt, "speed_loss")
    return torch.mean((pred - gt) ** 2)


def scene_loss(probs: torch.Tensor, labels: torch.Tensor, eps: float = PROB_FLOOR) -> torch.Tensor:
    """Pixel-wise cross-entropy averaged over images, pixels *and* classes.

    ``probs`` is B x C x H x W on the simplex, ``labels`` B x H x W class ids.
    """
    _nonempty(labels, "scene_loss")
    n_classes = probs.shape[1]
    logp = torch.log(probs.clamp_min(eps))
    picked = logp.gather(1, labels.long().unsqueeze(1)).squeeze(1)
    return -picked.mean() / n_classes


def total_loss(steer_l, speed_l, scene_l, w: LossWeights):
    return w.lambda1 * steer_l + w.lambda2 * speed_l + w.lambda3 * scene_l


# --- closed-form gradients (numpy) -------------------------------------------


def steering_loss_grad(pred: np.ndarray, gt: np.ndarray, alpha=5.0, beta=1.0, gamma=2.0) -> np.ndarray:
    """d steering_loss / d pred."""
    weight = (1.0 + alpha * np.abs(gt) ** beta) ** gamma
    return 2.0 * weight * (pred - gt) / pred.size


def speed_loss_grad(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return 2.0 * (pred - gt) / pred.size


def scene_loss_grad(probs: np.ndarray, labels: np.ndarray, eps: float = PROB_FLOOR) -> np.ndarray:
    """d scene_loss / d probs (zero where the floor is active)."""
    b, c = probs.shape[:2]
    n_pix = labels[0].size
    onehot = np.moveaxis(np.eye(c)[labels], -1, 1)
    grad = -onehot / np.maximum(probs, eps) / (b * n_pix * c)
    return np.where(probs > eps, grad, 0.0)


def scene_loss_grad_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d scene_loss(softmax(logits)) / d logits, ignoring the floor."""
    b, c = logits.shape[:2]
    n_pix = labels[0].size
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    onehot = np.moveaxis(np.eye(c)[labels], -1, 1)
    return (p - onehot) / (b * n_pix * c)


# --- data ---------------------------------------------------------------------


@dataclass
class TensorData:
    """Preprocessed unique frames plus an index list that carries balancing duplicates."""

    x: np.ndarray  # N x C x S x S uint8
    semantic: np.ndarray  # N x S x S uint8
    command: np.ndarray  # N int64
    steer: np.ndarray  # N float32
    speed: np.ndarray  # N float32, normalized by v_max
    index: np.ndarray  # M int64

    def __len__(self) -> int:
        return len(self.index)

    def subset(self, positions) -> "TensorData":
        return TensorData(self.x, self.semantic, self.command, self.steer, self.speed, self.index[np.asarray(positions, dtype=np.int64)])


def tensorize(dataset: Dataset, size: int, use_depth: bool = True) -> TensorData:
    rows: dict[int, int] = {}
    xs, sems, cmds, steers, speeds, index = [], [], [], [], [], []
    for s in dataset.samples:
        key = id(s)
        if key not in rows:
            rows[key] = len(xs)
            inp = preprocess(s.rgb, s.depth, size, use_depth)
            xs.append(np.round(inp * 255).astype(np.uint8).transpose(2, 0, 1))
            sems.append(preprocess_labels(s.semantic_gt, size))
            cmds.append(int(s.nav_command))
            steers.append(s.steer_gt)
            speeds.append(s.speed_gt / V_MAX)
        index.append(rows[key])
    c = 4 if use_depth else 3
    return TensorData(
        x=np.stack(xs) if xs else np.zeros((0, c, size, size), np.uint8),
        semantic=np.stack(sems) if sems else np.zeros((0, size, size), np.uint8),
        command=np.asarray(cmds, dtype=np.int64),
        steer=np.asarray(steers, dtype=np.float32),
        speed=np.asarray(speeds, dtype=np.float32),
        index=np.asarray(index, dtype=np.int64),
    )


def make_batch(data: TensorData, positions: np.ndarray, aug: AugmentConfig | None, seed_prefix=None):
    rows = data.index[positions]
    x = data.x[rows].astype(np.float32) / 255.0
    if aug is not None:
        for i, pos in enumerate(positions):
            rgb = x[i, :3].transpose(1, 2, 0)
            x[i, :3] = augment(rgb, [*seed_prefix, int(pos)], aug).transpose(2, 0, 1)
    return (
        torch.from_numpy(x),
        torch.from_numpy(data.semantic[rows].astype(np.int64)),
        torch.from_numpy(data.command[rows]),
        torch.from_numpy(data.steer[rows]),
        torch.from_numpy(data.speed[rows]),
    )


# --- loop ---------------------------------------------------------------------


class PlateauSchedule:
    """Halve the rate after ``patience`` consecutive epochs without a new best.

    ``best`` starts from the validation loss measured before the first epoch.
    """

    def __init__(self, lr: float, factor: float, patience: int, baseline: float = math.inf):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = baseline
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stop_reason: str = ""

    COLUMNS = (
        "epoch",
        "lr",
        "train_total",
        "train_steer",
        "train_speed",
        "train_scene",
        "val_total",
        "val_steer",
        "val_speed",
        "val_scene",
    )

    @property
    def lr_history(self) -> list[float]:
        return [e["lr"] for e in self.epochs]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.COLUMNS) + "\n")
        for e in self.epochs:
            buf.write(",".join(str(e["epoch"]) if c == "epoch" else f"{e[c]:.9g}" for c in self.COLUMNS) + "\n")
        buf.write(f"# best_epoch={self.best_epoch} best_val_loss={self.best_val_loss:.9g} stop={self.stop_reason}\n")
        return buf.getvalue()


def batch_losses(model: DrivingNet, batch, weights: LossWeights):
    x, sem, cmd, steer, speed = batch
    probs, ctrl = model(x, cmd)
    ls = steering_loss(ctrl[:, 0], steer, weights.alpha, weights.beta, weights.gamma)
    lv = speed_loss(ctrl[:, 1], speed)
    if probs is not None and weights.lambda3 > 0:
        lc = scene_loss(probs, sem)
    else:
        lc = torch.zeros((), dtype=ctrl.dtype)
    return total_loss(ls, lv, lc, weights), ls, lv, lc


def evaluate_losses(model: DrivingNet, data: TensorData, weights: LossWeights, batch_size: int = 64) -> dict:
    model.eval()
    sums = np.zeros(4)
    n = len(data)
    with torch.no_grad():
        for start in range(0, n, batch_size):
            pos = np.arange(start, min(n, start + batch_size))
            parts = batch_losses(model, make_batch(data, pos, None), weights)
            sums += np.array([float(p.detach()) for p in parts]) * len(pos)
    sums /= max(n, 1)
    return dict(zip(("total", "steer", "speed", "scene"), sums.tolist()))


def evaluate_metrics(model: DrivingNet, data: TensorData, batch_size: int = 64) -> dict:
    """Steer/speed MAE (normalized units) and semantic pixel accuracy in inference mode."""
    model.eval()
    steer_err = speed_err = correct = pixels = 0.0
    n = len(data)
    with torch.no_grad():
        for start in range(0, n, batch_size):
            pos = np.arange(start, min(n, start + batch_size))
            x, sem, cmd, steer, speed = make_batch(data, pos, None)
            probs, ctrl = model(x, cmd)
            steer_err += float((ctrl[:, 0] - steer).abs().sum())
            speed_err += float((ctrl[:, 1] - speed).abs().sum())
            if probs is not None:
                correct += float((probs.argmax(1) == sem).sum())
                pixels += sem.numel()
    return {
        "steer_mae": steer_err / n,
        "speed_mae": speed_err / n,
        "pixel_accuracy": correct / pixels if pixels else float("nan"),
    }


def train_model(
    train_set: TensorData,
    val_set: TensorData,
    model_config: ModelConfig,
    train_config: TrainConfig,
    weights: LossWeights | None = None,
    progress=None,
    augment_config: AugmentConfig | None = None,
) -> tuple[DrivingNet, TrainReport]:
    """Mini-batch NAdam training; returns the best-validation model and the report."""
    weights = weights or LossWeights()
    if not model_config.use_decoder and weights.lambda3 != 0:
        weights = LossWeights(**{**asdict(weights), "lambda3": 0.0})
    if len(train_set) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(train_config.seed)
    model = DrivingNet(model_config)
    opt = torch.optim.NAdam(model.parameters(), lr=train_config.initial_lr)
    baseline = evaluate_losses(model, val_set, weights)["total"] if len(val_set) else math.inf
    sched = PlateauSchedule(train_config.initial_lr, train_config.lr_decay_factor, train_config.lr_patience_epochs, baseline)
    report = TrainReport(best_val_loss=math.inf)
    best_state = copy.deepcopy(model.state_dict())
    since_best = 0
    aug = (augment_config or AugmentConfig()) if train_config.augment else None
    report.stop_reason = "max_epochs"

    for epoch in range(1, train_config.max_epochs + 1):
        model.train()
        order = np.random.default_rng([train_config.seed, epoch]).permutation(len(train_set))
        sums = np.zeros(4)
        for start in range(0, len(order), train_config.batch_size):
            pos = order[start : start + train_config.batch_size]
            batch = make_batch(train_set, pos, aug, (train_config.seed, epoch))
            parts = batch_losses(model, batch, weights)
            if not torch.isfinite(parts[0]):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            parts[0].backward()
            opt.step()
            sums += np.array([float(p.detach()) for p in parts]) * len(pos)
        train = sums / len(order)
        val = evaluate_losses(model, val_set, weights) if len(val_set) else dict(zip(("total", "steer", "speed", "scene"), train))
        row = {"epoch": epoch, "lr": opt.param_groups[0]["lr"]}
        row.update({f"train_{k}": v for k, v in zip(("total", "steer", "speed", "scene"), train.tolist())})
        row.update({f"val_{k}": v for k, v in val.items()})
        report.epochs.append(row)
        if progress:
            progress(row)

        if val["total"] < report.best_val_loss:
            report.best_val_loss = val["total"]
            report.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
        else:
            since_best += 1
        new_lr = sched.step(val["total"])
        for g in opt.param_groups:
            g["lr"] = new_lr
        if since_best >= train_config.early_stop_patience:
            report.stop_reason = "early_stopping"
            break

    model.load_state_dict(best_state)
    model.eval()
    return model, report

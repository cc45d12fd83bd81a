"""Supervised ViT training: Adam, plateau lr reduction and early stopping per epoch."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as D
from . import vit
from .core import AdamState, Rng, Tensor, adam_step, make_node
from .errors import ConfigError, DataError, DimensionError, NonFiniteError

TERMINAL_REASONS = ("max_epochs", "early_stop")


@dataclass(frozen=True)
class PlateauConfig:
    factor: float = 0.5
    patience: int = 3
    min_delta: float = 1e-4
    min_lr: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"plateau factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ConfigError(f"plateau patience must be >= 1, got {self.patience}")
        if self.min_delta < 0 or self.min_lr < 0:
            raise ConfigError("plateau min_delta and min_lr must be non-negative")


@dataclass(frozen=True)
class EarlyStopConfig:
    patience: int = 6
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"early-stop patience must be >= 1, got {self.patience}")
        if self.min_delta < 0:
            raise ConfigError("early-stop min_delta must be non-negative")


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.eps > 0):
            raise ConfigError(f"invalid Adam settings {self}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    image_size: int = 384
    max_epochs: int = 50
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    seed: int = 0
    adam: AdamConfig = field(default_factory=AdamConfig)
    augment: D.AugmentSpec = field(default_factory=D.AugmentSpec)
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = {k: list(v) for k, v in d["augment"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        try:
            for key, sub in (("plateau", PlateauConfig), ("early_stop", EarlyStopConfig), ("adam", AdamConfig)):
                if key in d and not isinstance(d[key], sub):
                    d[key] = sub(**d[key])
            if "augment" in d and not isinstance(d["augment"], D.AugmentSpec):
                d["augment"] = D.AugmentSpec(**{k: tuple(v) for k, v in d["augment"].items()})
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc


# ---------------------------------------------------------------- schedule rules


@dataclass(frozen=True)
class PlateauState:
    lr: float
    best: float = math.inf
    wait: int = 0
    reduced: bool = False


def plateau_update(state: PlateauState, val_loss: float, cfg: PlateauConfig) -> PlateauState:
    """Reduce lr by ``factor`` after ``patience`` epochs without a ``min_delta`` improvement."""
    if val_loss < state.best - cfg.min_delta:
        return PlateauState(state.lr, float(val_loss), 0, False)
    wait = state.wait + 1
    if wait >= cfg.patience:
        return PlateauState(max(state.lr * cfg.factor, cfg.min_lr), state.best, 0, True)
    return PlateauState(state.lr, state.best, wait, False)


@dataclass(frozen=True)
class EarlyStopState:
    best: float = math.inf
    best_epoch: int = 0
    wait: int = 0
    epoch: int = 0
    stop: bool = False


def early_stop_update(state: EarlyStopState, val_loss: float, cfg: EarlyStopConfig) -> EarlyStopState:
    """Epochs are counted from 1; ``stop`` turns on after ``patience`` non-improving epochs."""
    epoch = state.epoch + 1
    if val_loss < state.best - cfg.min_delta:
        return EarlyStopState(float(val_loss), epoch, 0, epoch, False)
    wait = state.wait + 1
    return EarlyStopState(state.best, state.best_epoch, wait, epoch, wait >= cfg.patience)


# ---------------------------------------------------------------- loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    z = logits.data
    labels = np.asarray(labels)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"logits {z.shape} and labels {labels.shape} do not pair up")
    b, c = z.shape
    if labels.dtype.kind not in "iu" or ((labels < 0) | (labels >= c)).any():
        raise DataError(f"labels must be integers in [0, {c}), got {labels.tolist()}")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / b,)

    return make_node(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def nll_from_logits(logits: np.ndarray, labels) -> np.ndarray:
    """Per-sample cross-entropy in float64."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(z)), np.asarray(labels)]


# ---------------------------------------------------------------- log


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float
    wall_time: float = 0.0

    def line(self) -> dict:
        # wall_time lives in the timing sidecar so the log itself is reproducible
        return {"type": "epoch", "epoch": self.epoch, "train_loss": self.train_loss, "val_loss": self.val_loss,
                "val_accuracy": self.val_accuracy, "lr": self.lr}


@dataclass
class TrainLog:
    config: dict
    model: dict
    initial_train_loss: float | None = None
    initial_val_loss: float | None = None
    epochs: list = field(default_factory=list)
    terminal_reason: str | None = None
    best_epoch: int | None = None
    best_val_loss: float | None = None

    @property
    def lrs(self) -> list[float]:
        return [e.lr for e in self.epochs]

    @property
    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.epochs]

    def lines(self) -> list[dict]:
        out = [{"type": "header", "hyperparameters": self.config, "model": self.model,
                "initial_train_loss": self.initial_train_loss, "initial_val_loss": self.initial_val_loss}]
        out += [e.line() for e in self.epochs]
        if self.terminal_reason is not None:
            out.append({"type": "summary", "terminal_reason": self.terminal_reason, "epochs": len(self.epochs),
                        "best_epoch": self.best_epoch, "best_val_loss": self.best_val_loss})
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(line, sort_keys=True) + "\n" for line in self.lines())

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_jsonl(), encoding="utf-8")
        tmp.replace(path)
        return path

    @classmethod
    def read(cls, path) -> "TrainLog":
        lines = [json.loads(s) for s in Path(path).read_text(encoding="utf-8").splitlines() if s.strip()]
        if not lines or lines[0].get("type") != "header":
            raise DataError(f"{path}: training log has no header line")
        head = lines[0]
        log = cls(head["hyperparameters"], head["model"], head.get("initial_train_loss"),
                  head.get("initial_val_loss"))
        for line in lines[1:]:
            if line["type"] == "epoch":
                log.epochs.append(EpochRecord(line["epoch"], line["train_loss"], line["val_loss"],
                                              line["val_accuracy"], line["lr"]))
            elif line["type"] == "summary":
                log.terminal_reason = line["terminal_reason"]
                log.best_epoch = line["best_epoch"]
                log.best_val_loss = line["best_val_loss"]
        return log


def retrace(val_losses, train_cfg: TrainConfig) -> tuple[list[float], int | None]:
    """Replay the lr and stop decisions implied by a val_loss sequence.

    Returns the lr used in each epoch and the 1-based epoch at which training
    stopped early (None if it never did). Written independently of the
    stateful helpers so a logged run can be checked against it.
    """
    lr, best_p, wait_p = train_cfg.learning_rate, math.inf, 0
    best_e, wait_e = math.inf, 0
    pc, ec = train_cfg.plateau, train_cfg.early_stop
    lrs = []
    for epoch, loss in enumerate(val_losses, start=1):
        lrs.append(lr)
        if loss < best_e - ec.min_delta:
            best_e, wait_e = loss, 0
        else:
            wait_e += 1
            if wait_e >= ec.patience:
                return lrs, epoch
        if loss < best_p - pc.min_delta:
            best_p, wait_p = loss, 0
        else:
            wait_p += 1
            if wait_p >= pc.patience:
                lr, wait_p = max(lr * pc.factor, pc.min_lr), 0
    return lrs, None


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    params: vit.ViTParams
    log: TrainLog
    best_checkpoint: Path | None


def load_split(manifest: D.DatasetManifest, split: str, image_size: int, dtype,
               loader: Callable | None = None) -> tuple[np.ndarray, np.ndarray]:
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty")
    load = loader or (lambda rec: D.load_image(manifest.resolve(rec), image_size))
    images = np.stack([load(r) for r in records]).astype(dtype)
    return images, np.array([D.LABELS.index(r.label) for r in records])


def predict_logits(params: vit.ViTParams, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    chunks = [vit.forward(params, images[s : s + batch_size]) for s in range(0, len(images), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, params.config.num_classes))


def evaluate_loss(params: vit.ViTParams, images, labels, batch_size: int = 64) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) in eval mode."""
    logits = predict_logits(params, images, batch_size)
    loss = float(nll_from_logits(logits, labels).mean())
    acc = float((np.argmax(logits, axis=1) == labels).mean())
    return loss, acc


def train(model_cfg: vit.ViTConfig, params: vit.ViTParams | None, train_cfg: TrainConfig,
          manifest: D.DatasetManifest, out_dir=None, loader: Callable | None = None,
          on_epoch: Callable | None = None, validate: bool = True) -> TrainResult:
    """Train on the manifest's train split, selecting on validation loss.

    With ``out_dir`` the best checkpoint (``best.ckpt``), the JSONL log
    (``train_log.jsonl``) and wall-clock timings (``train_timing.json``) are
    written there.
    """
    if train_cfg.image_size != model_cfg.image_size:
        raise ConfigError(f"train image_size {train_cfg.image_size} != model image_size {model_cfg.image_size}")
    if validate and manifest.policy is not None:
        report = D.validate_manifest(manifest)
        if not report.passed:
            raise DataError("manifest fails its composition policy:\n" + report.format())
    dtype = np.dtype(train_cfg.dtype)
    if params is None:
        params = vit.init_params(model_cfg, Rng(train_cfg.seed).fork(0), dtype)
    elif params.config != model_cfg:
        raise ConfigError("params were built for a different model config")
    params = vit.ViTParams(model_cfg, {k: v.astype(dtype) for k, v in params.tensors.items()})

    log = TrainLog(train_cfg.to_dict(), model_cfg.to_dict())
    out_dir = Path(out_dir) if out_dir is not None else None
    if train_cfg.max_epochs == 0:
        return TrainResult(params, log, None)

    x_train, y_train = load_split(manifest, "train", model_cfg.image_size, dtype, loader)
    x_val, y_val = load_split(manifest, "validation", model_cfg.image_size, dtype, loader)
    log.initial_train_loss, _ = evaluate_loss(params, x_train, y_train)
    log.initial_val_loss, _ = evaluate_loss(params, x_val, y_val)

    root = Rng(train_cfg.seed)
    tensors = dict(params.tensors)
    state = AdamState()
    plateau = PlateauState(train_cfg.learning_rate)
    stopper = EarlyStopState()
    best_path = None
    best_val = math.inf
    timings = []
    a = train_cfg.adam

    for epoch in range(1, train_cfg.max_epochs + 1):
        t0 = time.perf_counter()
        lr = plateau.lr
        order = D.epoch_order(len(x_train), train_cfg.seed, epoch)
        total, count = 0.0, 0
        for b, idx in enumerate(D.batch_slices(len(order), train_cfg.batch_size, order)):
            aug = root.fork(1, epoch, b)
            batch = np.stack([D.augment(x_train[i], train_cfg.augment, aug.fork(j)) for j, i in enumerate(idx)])
            leaves = {k: Tensor(v, requires_grad=True) for k, v in tensors.items()}
            logits = vit.apply(model_cfg, leaves, batch.astype(dtype), "train", root.fork(2, epoch, b))
            loss = cross_entropy(logits, y_train[idx])
            if not np.isfinite(loss.data):
                raise NonFiniteError(f"non-finite training loss at epoch {epoch}, batch {b}")
            loss.backward()
            grads = {k: leaf.grad for k, leaf in leaves.items()}
            tensors, state = adam_step(tensors, grads, state, lr=lr, beta1=a.beta1, beta2=a.beta2, eps=a.eps)
            total += float(loss.data) * len(idx)
            count += len(idx)
        current = vit.ViTParams(model_cfg, tensors)
        val_loss, val_acc = evaluate_loss(current, x_val, y_val)
        if not math.isfinite(val_loss):
            raise NonFiniteError(f"non-finite validation loss after epoch {epoch}")
        timings.append(time.perf_counter() - t0)
        log.epochs.append(EpochRecord(epoch, total / count, val_loss, val_acc, lr, timings[-1]))

        if val_loss < best_val:
            best_val = val_loss
            log.best_epoch, log.best_val_loss = epoch, val_loss
            if out_dir is not None:
                best_path = vit.save_checkpoint(current, out_dir / "best.ckpt",
                                                extra={"epoch": epoch, "val_loss": val_loss})
        plateau = plateau_update(plateau, val_loss, train_cfg.plateau)
        stopper = early_stop_update(stopper, val_loss, train_cfg.early_stop)
        if stopper.stop:
            log.terminal_reason = "early_stop"
        elif epoch == train_cfg.max_epochs:
            log.terminal_reason = "max_epochs"
        if out_dir is not None:
            log.write(out_dir / "train_log.jsonl")
            (out_dir / "train_timing.json").write_text(json.dumps({"epoch_seconds": timings}) + "\n")
        if on_epoch is not None:
            on_epoch(log.epochs[-1])
        if stopper.stop:
            break

    return TrainResult(vit.ViTParams(model_cfg, tensors), log, best_path)


__all__ = [
    "AdamConfig", "EarlyStopConfig", "EarlyStopState", "EpochRecord", "PlateauConfig", "PlateauState",
    "TrainConfig", "TrainLog", "TrainResult", "cross_entropy", "early_stop_update", "evaluate_loss",
    "load_split", "nll_from_logits", "plateau_update", "predict_logits", "retrace", "train",
]

"""Transfer-learning classifiers and the training loop.

Every backbone is wrapped in :class:`Classifier`: a ``features`` module that
yields the last convolutional feature map, then global average pooling,
dropout and a single logit. The infected probability is ``sigmoid(logit)``.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import augment_batch
from .dataset import PreprocessConfig
from .errors import CheckpointError, ConfigError, PretrainedWeightsError, ShapeError, TrainingDivergedError

log = logging.getLogger(__name__)

BACKBONES = ("densenet201", "resnet50", "tiny_test")
WEIGHTS_DIR_ENV = "PCOS_SCREEN_WEIGHTS_DIR"
HISTORY_FIELDS = ("epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy")

# default max epochs and patience per backbone
BACKBONE_SCHEDULES = {
    "densenet201": (98, 15),
    "resnet50": (67, 10),
    "tiny_test": (30, 10),
}


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "densenet201"
    pretrained: bool = True
    input_size: int = 224
    freeze_backbone: bool = False
    dropout: float = 0.5

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.kind!r}; expected one of {BACKBONES}")
        if self.input_size <= 0:
            raise ConfigError("input_size must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    loss: str = "binary_cross_entropy"
    max_epochs: int = 98
    patience: int = 15
    monitor: str = "val_loss"
    mixup_alpha: float = 0.0
    cutmix_alpha: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ConfigError("patience must lie in [0, max_epochs]")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss != "binary_cross_entropy":
            raise ConfigError(f"unsupported loss {self.loss!r}")
        if self.monitor != "val_loss":
            raise ConfigError(f"unsupported monitor {self.monitor!r}")
        if self.mixup_alpha < 0 or self.cutmix_alpha < 0:
            raise ConfigError("augmentation alphas must be >= 0")

    @classmethod
    def for_backbone(cls, kind: str, **overrides) -> "TrainConfig":
        max_epochs, patience = BACKBONE_SCHEDULES[kind]
        return cls(**{"max_epochs": max_epochs, "patience": patience, **overrides})

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class EpochRecord:
    epoch_index: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainingHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    checkpoint_epochs: list[int] = field(default_factory=list)

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch - 1]

    def checkpoint_losses(self) -> list[float]:
        return [self.epochs[e - 1].val_loss for e in self.checkpoint_epochs]


# -- networks -------------------------------------------------------------------


class Classifier(nn.Module):
    """``features`` -> global average pool -> dropout -> linear -> logit."""

    def __init__(self, features: nn.Module, feature_channels: int, dropout: float = 0.5):
        super().__init__()
        self.features = features
        self.dropout = nn.Dropout(dropout)
        self.head = nn.Linear(feature_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a = self.features(x)
        pooled = a.mean(dim=(2, 3))
        return self.head(self.dropout(pooled)).squeeze(1)


def tiny_features() -> nn.Sequential:
    # unpadded convolutions keep a constant input constant, which tests rely on
    return nn.Sequential(
        nn.Conv2d(3, 8, kernel_size=3),
        nn.ReLU(),
        nn.Conv2d(8, 8, kernel_size=3, stride=2),
        nn.ReLU(),
    )


def _pretrained_state(weights_enum):
    model_dir = os.environ.get(WEIGHTS_DIR_ENV)
    try:
        return weights_enum.get_state_dict(progress=False, model_dir=model_dir)
    except Exception as exc:  # network, filesystem or hash failure
        raise PretrainedWeightsError(
            f"pretrained weights {weights_enum} are unavailable ({type(exc).__name__}: {exc}); "
            f"place the checkpoint file in ${WEIGHTS_DIR_ENV} or set pretrained=False"
        ) from exc


def _torchvision_features(spec: BackboneSpec) -> tuple[nn.Module, int]:
    import torchvision.models as tvm

    if spec.kind == "densenet201":
        net = tvm.densenet201(weights=None)
        if spec.pretrained:
            net.load_state_dict(_pretrained_state(tvm.DenseNet201_Weights.IMAGENET1K_V1))
        # torchvision applies this ReLU in forward(), outside `features`
        return nn.Sequential(net.features, nn.ReLU()), net.classifier.in_features
    net = tvm.resnet50(weights=None)
    if spec.pretrained:
        net.load_state_dict(_pretrained_state(tvm.ResNet50_Weights.IMAGENET1K_V2))
    body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                         net.layer1, net.layer2, net.layer3, net.layer4)
    return body, net.fc.in_features


@dataclass
class ModelHandle:
    spec: BackboneSpec
    module: Classifier
    feature_layer: str = "features"
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    def __call__(self, images) -> list[float]:
        return predict(self, images)


def build_model(spec: BackboneSpec, seed: int = 0) -> ModelHandle:
    """Build a classifier; the head (and tiny backbone) is initialised from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if spec.kind == "tiny_test":
            features, channels = tiny_features(), 8
        else:
            features, channels = _torchvision_features(spec)
        module = Classifier(features, channels, dropout=spec.dropout)
    if spec.freeze_backbone:
        for p in module.features.parameters():
            p.requires_grad_(False)
    module.eval()
    return ModelHandle(spec=spec, module=module,
                       preprocess=PreprocessConfig(target_size=spec.input_size))


# -- inference ------------------------------------------------------------------


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2)


def predict_logits(model: ModelHandle, images, batch_size: int = 64) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.size == 0 and images.ndim <= 1:
        return np.zeros(0)
    s = model.spec.input_size
    if images.ndim != 4 or images.shape[1:] != (s, s, 3):
        raise ShapeError(f"expected images of shape (N, {s}, {s}, 3), got {images.shape}")
    module = model.module
    was_training = module.training
    module.eval()
    out = []
    try:
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                out.append(module(_to_tensor(images[start:start + batch_size])).double().numpy())
    finally:
        module.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def predict(model: ModelHandle, images, batch_size: int = 64) -> list[float]:
    return sigmoid(predict_logits(model, images, batch_size)).tolist()


def binary_cross_entropy(probs, targets, eps: float = 1e-12) -> np.ndarray:
    """Per-sample BCE; affine in the (possibly soft) target."""
    p = np.clip(np.asarray(probs, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(targets, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def evaluate_split(model: ModelHandle, data, batch_size: int = 64) -> tuple[float, float, np.ndarray]:
    """Return (mean BCE, accuracy at threshold 0.5, probabilities) on ``data``."""
    logits = []
    for start in range(0, len(data), batch_size):
        images, _, _ = data.batch(range(start, min(start + batch_size, len(data))))
        logits.append(predict_logits(model, images, batch_size))
    z = np.concatenate(logits)
    y = np.asarray(data.labels, dtype=np.float64)
    loss = F.binary_cross_entropy_with_logits(torch.from_numpy(z), torch.from_numpy(y)).item()
    probs = sigmoid(z)
    acc = float(np.mean((probs >= 0.5) == (y >= 0.5)))
    return loss, acc, probs


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: ModelHandle, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "spec": dataclasses.asdict(model.spec),
        "preprocess": dataclasses.asdict(model.preprocess),
        "feature_layer": model.feature_layer,
        "state_dict": model.module.state_dict(),
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> ModelHandle:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        spec = BackboneSpec(**{**payload["spec"], "pretrained": False})
        model = build_model(spec)
        model.module.load_state_dict(payload["state_dict"])
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    model.spec = dataclasses.replace(spec, pretrained=payload["spec"].get("pretrained", False))
    model.preprocess = PreprocessConfig(**payload.get("preprocess", {}))
    model.feature_layer = payload.get("feature_layer", "features")
    model.module.eval()
    return model


# -- training -------------------------------------------------------------------


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Pin torch to deterministic kernels for the duration of the block."""
    if not enabled:
        yield
        return
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def write_history(history: TrainingHistory, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for e in history.epochs:
            w.writerow([e.epoch_index] + [repr(float(v)) for v in
                       (e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy)])
        fh.flush()
        os.fsync(fh.fileno())


def read_history(path: str | Path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_accuracy"]),
                        float(r["val_loss"]), float(r["val_accuracy"])) for r in rows]


def train(model: ModelHandle, train_data, val_data, config: TrainConfig, run_dir: str | Path,
          deterministic: bool = True,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[TrainingHistory, Path]:
    """Fit ``model`` with Adam + BCE, early stopping on val_loss.

    ``train_data``/``val_data`` expose ``__len__``, ``labels`` and
    ``batch(indices) -> (images, labels, ids)``. The best checkpoint goes to
    ``<run_dir>/checkpoints/best.pt`` with a ``best.txt`` sidecar; the history
    table is rewritten after every epoch.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ConfigError("training and validation splits must be non-empty")
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = ckpt_dir / "best.pt"
    history_path = run_dir / "history.csv"

    rng = np.random.default_rng(config.seed)
    module = model.module
    params = [p for p in module.parameters() if p.requires_grad]
    history = TrainingHistory()
    best_loss = math.inf
    since_best = 0

    with deterministic_mode(deterministic), torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        optimizer = torch.optim.Adam(params, lr=config.learning_rate)
        for epoch in range(1, config.max_epochs + 1):
            module.train()
            order = rng.permutation(len(train_data))
            loss_sum, correct, seen = 0.0, 0, 0
            for start in range(0, len(order), config.batch_size):
                images, labels, ids = train_data.batch(order[start:start + config.batch_size])
                if (config.mixup_alpha > 0 or config.cutmix_alpha > 0) and len(labels) >= 2:
                    mixed = augment_batch(list(zip(images, labels)), config.mixup_alpha,
                                          config.cutmix_alpha, rng, ids=ids)
                    images = np.stack([m.image for m in mixed])
                    labels = np.array([m.soft_label for m in mixed], dtype=np.float32)
                x = _to_tensor(images)
                y = torch.from_numpy(np.asarray(labels, dtype=np.float32))
                logits = module(x)
                loss = F.binary_cross_entropy_with_logits(logits, y)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(epoch, loss.item())
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                n = len(y)
                loss_sum += loss.item() * n
                correct += int(((logits.detach() >= 0) == (y >= 0.5)).sum())
                seen += n

            val_loss, val_acc, _ = evaluate_split(model, val_data)
            if not math.isfinite(val_loss):
                raise TrainingDivergedError(epoch, val_loss)
            rec = EpochRecord(epoch, loss_sum / seen, correct / seen, val_loss, val_acc)
            history.epochs.append(rec)

            if val_loss < best_loss:
                best_loss = val_loss
                since_best = 0
                history.best_epoch = epoch
                history.checkpoint_epochs.append(epoch)
                save_checkpoint(model, ckpt_path, extra={"epoch": epoch, "config": dataclasses.asdict(config)})
                (ckpt_dir / "best.txt").write_text(
                    f"epoch\t{epoch}\nval_loss\t{val_loss!r}\nval_accuracy\t{val_acc!r}\n"
                    f"config_hash\t{config.digest()}\n"
                )
            else:
                since_best += 1
            write_history(history, history_path)
            log.info("epoch %d train_loss=%.5f train_acc=%.4f val_loss=%.5f val_acc=%.4f",
                     epoch, rec.train_loss, rec.train_accuracy, val_loss, val_acc)
            if on_epoch is not None:
                on_epoch(rec)
            if since_best >= config.patience and epoch < config.max_epochs:
                history.stopped_early = True
                break

    module.eval()
    return history, ckpt_path


def model_digest(model: ModelHandle) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]

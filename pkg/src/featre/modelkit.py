"""Classifier architectures, named-layer splitting, training, checkpoints.

Every architecture is a :class:`LayeredClassifier`: an ordered sequence of
named blocks whose forward is their composition. :func:`split` factors a model
at any named block into A (input to features) and B (features to logits) with
``B(A(x))`` exactly equal to the original forward; downstream analysis works
on A's output, "the feature space". The default split point is the last conv
block; the penultimate fc layer is the alternative axis.

Checkpoints are a ``.pt`` state dict plus a ``.meta`` text sidecar with the
architecture recipe, dataset, seed, and (for trojaned models) the attack
spec, so models rebuild without pickled code.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kvtext
from .attacks import TriggerSpec, asr_eval_split
from .datakit import DatasetStats, LabeledDataset, get_stats, normalize

CHECKPOINT_VERSION = 1
LAST_CONV = "LAST_CONV"


def seed_all(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


class LayeredClassifier(nn.Module):
    """Ordered named blocks; forward runs them in sequence."""

    def __init__(self, arch: str, blocks, input_shape, num_classes: int, config: dict):
        super().__init__()
        self.blocks = nn.ModuleDict(dict(blocks))
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.config = dict(config)

    @property
    def layer_names(self) -> list:
        return list(self.blocks.keys())

    def forward(self, x):
        for block in self.blocks.values():
            x = block(x)
        return x

    def last_conv_layer(self) -> str:
        name = None
        for key, block in self.blocks.items():
            if any(isinstance(m, nn.Conv2d) for m in block.modules()):
                name = key
        if name is None:
            raise ValueError(f"{self.arch}: no conv layer to split at")
        return name


class SplitModel(nn.Module):
    """A classifier factored at `split_layer` into features() and head().

    Shares the base model's modules, so it stays exact and tracks any later
    weight updates to the base.
    """

    def __init__(self, base: LayeredClassifier, split_layer: str = LAST_CONV):
        super().__init__()
        if split_layer == LAST_CONV:
            split_layer = base.last_conv_layer()
        names = base.layer_names
        if split_layer not in names[:-1]:
            raise ValueError(
                f"cannot split at {split_layer!r}; valid layers: {names[:-1]}"
            )
        self.base = base
        self.split_layer = split_layer
        cut = names.index(split_layer) + 1
        self.pre_names, self.post_names = names[:cut], names[cut:]
        was_training = base.training
        base.eval()
        dtype = next((p.dtype for p in base.parameters()), torch.float32)
        with torch.no_grad():
            probe = self.features(torch.zeros((1,) + base.input_shape, dtype=dtype))
        base.train(was_training)
        self.feature_shape = tuple(probe.shape[1:])
        self.num_classes = base.num_classes
        self.input_shape = base.input_shape

    def features(self, x):
        for name in self.pre_names:
            x = self.base.blocks[name](x)
        return x

    def head(self, a):
        for name in self.post_names:
            a = self.base.blocks[name](a)
        return a

    def forward(self, x):
        return self.head(self.features(x))


def split(model: LayeredClassifier, layer: str = LAST_CONV) -> SplitModel:
    return SplitModel(model, layer)


# ---------------------------------------------------------------------------
# architectures


def small_cnn_4c2f(in_channels=1, num_classes=10, image_size=32,
                   channels=(16, 32, 64, 64), fc_width=256) -> LayeredClassifier:
    if image_size % 8 != 0:
        raise ValueError("image_size must be divisible by 8")
    c1, c2, c3, c4 = channels
    side = image_size // 8
    blocks = [
        ("conv1", nn.Sequential(nn.Conv2d(in_channels, c1, 3, padding=1), nn.ReLU())),
        ("conv2", nn.Sequential(nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))),
        ("conv3", nn.Sequential(nn.Conv2d(c2, c3, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))),
        ("conv4", nn.Sequential(nn.Conv2d(c3, c4, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))),
        ("flatten", nn.Flatten()),
        ("fc1", nn.Sequential(nn.Linear(c4 * side * side, fc_width), nn.ReLU())),
        ("fc2", nn.Linear(fc_width, num_classes)),
    ]
    config = {"in_channels": in_channels, "num_classes": num_classes,
              "image_size": image_size, "channels": list(channels), "fc_width": fc_width}
    return LayeredClassifier("small_cnn_4c2f", blocks, (in_channels, image_size, image_size),
                             num_classes, config)


def lenet5_like(in_channels=1, num_classes=10, image_size=32) -> LayeredClassifier:
    side = (image_size - 4) // 2
    side = (side - 4) // 2
    blocks = [
        ("c1", nn.Sequential(nn.Conv2d(in_channels, 6, 5), nn.ReLU(), nn.MaxPool2d(2))),
        ("c2", nn.Sequential(nn.Conv2d(6, 16, 5), nn.ReLU(), nn.MaxPool2d(2))),
        ("flatten", nn.Flatten()),
        ("f1", nn.Sequential(nn.Linear(16 * side * side, 120), nn.ReLU())),
        ("f2", nn.Sequential(nn.Linear(120, 84), nn.ReLU())),
        ("out", nn.Linear(84, num_classes)),
    ]
    config = {"in_channels": in_channels, "num_classes": num_classes, "image_size": image_size}
    return LayeredClassifier("lenet5_like", blocks, (in_channels, image_size, image_size),
                             num_classes, config)


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def resnet18_like(in_channels=3, num_classes=10, image_size=32, width=64) -> LayeredClassifier:
    def stage(cin, cout, stride):
        return nn.Sequential(_BasicBlock(cin, cout, stride), _BasicBlock(cout, cout, 1))

    w = width
    blocks = [
        ("stem", nn.Sequential(nn.Conv2d(in_channels, w, 3, padding=1, bias=False),
                               nn.BatchNorm2d(w), nn.ReLU())),
        ("layer1", stage(w, w, 1)),
        ("layer2", stage(w, 2 * w, 2)),
        ("layer3", stage(2 * w, 4 * w, 2)),
        ("layer4", stage(4 * w, 8 * w, 2)),
        ("pool", nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten())),
        ("fc", nn.Linear(8 * w, num_classes)),
    ]
    config = {"in_channels": in_channels, "num_classes": num_classes,
              "image_size": image_size, "width": width}
    return LayeredClassifier("resnet18_like", blocks, (in_channels, image_size, image_size),
                             num_classes, config)


ARCHITECTURES = {
    "small_cnn_4c2f": small_cnn_4c2f,
    "lenet5_like": lenet5_like,
    "resnet18_like": resnet18_like,
}


def build_model(arch: str, **kwargs) -> LayeredClassifier:
    try:
        builder = ARCHITECTURES[arch]
    except KeyError:
        raise KeyError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}") from None
    return builder(**kwargs)


def clone_model(model: nn.Module) -> nn.Module:
    return copy.deepcopy(model)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 128
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9
    optimizer_kind: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0; batch_size and learning_rate > 0")
        if self.optimizer_kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer_kind!r}")

    def to_kv(self, prefix: str = "train") -> dict:
        return {f"{prefix}.{k}": v for k, v in asdict(self).items()}

    @classmethod
    def from_kv(cls, kv: dict, prefix: str = "train") -> "TrainConfig":
        sub = kvtext.subkeys(kv, prefix)
        return cls(**{k: kvtext.coerce(v) for k, v in sub.items()})


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last finite-state dict."""

    def __init__(self, message, last_state):
        super().__init__(message)
        self.last_state = last_state


def make_optimizer(model: nn.Module, cfg: TrainConfig):
    if cfg.optimizer_kind == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                                weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
                           momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def train(ds: LabeledDataset, arch, cfg: TrainConfig, stats: DatasetStats,
          eval_test: LabeledDataset = None, eval_attack: TriggerSpec = None,
          log=None) -> tuple[LayeredClassifier, list]:
    """Train `arch` (a name or an existing model) on `ds`.

    Returns (model, rows) where rows log per-epoch loss and, when `eval_test`
    is given, BA/ASR on it. Non-finite loss raises TrainingDiverged with the
    last finite checkpoint attached.
    """
    rng = seed_all(cfg.seed)
    if isinstance(arch, str):
        model = build_model(arch, in_channels=stats.image_shape[0],
                            num_classes=ds.num_classes, image_size=stats.image_shape[1])
    else:
        model = arch
    opt = make_optimizer(model, cfg)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1))
    labels_t = torch.from_numpy(ds.labels)
    n = len(ds)
    rows = []
    last_state = copy.deepcopy(model.state_dict())
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(n)
        loss_sum, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = normalize(ds.images[idx], stats)
            y = labels_t[idx]
            opt.zero_grad()
            loss = F.cross_entropy(model(x), y)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(
                    f"loss became {loss.item()} at epoch {epoch + 1}", last_state)
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            seen += len(idx)
        sched.step()
        last_state = copy.deepcopy(model.state_dict())
        row = {"epoch": epoch + 1, "loss": loss_sum / seen}
        if eval_test is not None:
            scores = evaluate(model, eval_test, stats, eval_attack)
            row["BA"] = scores["BA"]
            if "ASR" in scores:
                row["ASR"] = scores["ASR"]
        rows.append(row)
        if log is not None:
            extras = "".join(f" {k} {v:.4f}" for k, v in row.items() if k not in ("epoch",))
            log(f"epoch {epoch + 1}/{cfg.epochs}{extras}")
    model.eval()
    return model, rows


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def predict(model: nn.Module, images: np.ndarray, stats: DatasetStats,
            batch_size: int = 256) -> np.ndarray:
    model.eval()
    preds = []
    for start in range(0, len(images), batch_size):
        x = normalize(images[start:start + batch_size], stats)
        preds.append(model(x).argmax(1).numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model: nn.Module, ds: LabeledDataset, stats: DatasetStats) -> float:
    if len(ds) == 0:
        raise ValueError("cannot score an empty dataset")
    return float((predict(model, ds.images, stats) == ds.labels).mean())


def attack_success_rate(model: nn.Module, clean_test: LabeledDataset,
                        spec: TriggerSpec, stats: DatasetStats) -> float:
    """Fraction of triggered eligible test samples classified as the attack
    wants. Samples whose true label is the target are excluded (all_to_one)."""
    triggered, wanted = asr_eval_split(clean_test, spec)
    if len(wanted) == 0:
        raise ValueError("no eligible samples for the attack-success split")
    return float((predict(model, triggered, stats) == wanted).mean())


def evaluate(model: nn.Module, clean_test: LabeledDataset, stats: DatasetStats,
             attack: TriggerSpec = None) -> dict:
    """BA on the clean test set; ASR included only when an attack is given."""
    out = {"BA": accuracy(model, clean_test, stats)}
    if attack is not None:
        out["ASR"] = attack_success_rate(model, clean_test, attack, stats)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: LayeredClassifier, dataset: str, seed: int,
                    attack: TriggerSpec = None, extra: dict = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    meta = {"version": CHECKPOINT_VERSION, "arch.name": model.arch}
    for k, v in model.config.items():
        meta[f"arch.{k}"] = v
    meta["dataset"] = dataset
    meta["seed"] = seed
    meta["trojaned"] = attack is not None
    if attack is not None:
        meta.update(attack.to_kv("attack"))
    if extra:
        meta.update(extra)
    kvtext.write_kv(path.with_suffix(path.suffix + ".meta"), meta)


def load_checkpoint(path) -> tuple[LayeredClassifier, dict]:
    path = Path(path)
    meta_path = path.with_suffix(path.suffix + ".meta")
    if not meta_path.exists():
        raise FileNotFoundError(f"checkpoint sidecar missing: {meta_path}")
    meta = kvtext.read_kv(meta_path)
    version = kvtext.get_int(meta, "version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version} not supported "
                         f"(expected {CHECKPOINT_VERSION})")
    arch_kv = kvtext.subkeys(meta, "arch")
    name = arch_kv.pop("name")
    kwargs = {k: kvtext.coerce(v) for k, v in arch_kv.items()}
    model = build_model(name, **kwargs)
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model, meta


def checkpoint_stats(meta: dict) -> DatasetStats:
    return get_stats(meta["dataset"])


def checkpoint_attack(meta: dict) -> TriggerSpec:
    if not kvtext.get_bool(meta, "trojaned"):
        raise ValueError("checkpoint is not marked trojaned; no attack recipe stored")
    return TriggerSpec.from_kv(meta, "attack")

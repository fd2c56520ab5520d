"""3D residual classifiers for benign/malignant patches.

Ships a desk-scale two-stage network for fast experiments plus the named
deep presets (resnet50/101/152, resnext101) adapted to single-channel 3D
input. Training supports unweighted and class-weighted cross entropy and
on-the-fly cropping/scaling augmentation; model selection follows the
highest validation AUC (ties broken toward the earlier epoch).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from nodulesynth import checkpoint
from nodulesynth.metrics import MetricsReport, confusion_report, format_metrics_table, mean_metrics
from nodulesynth.patches import PatchSample, load_patch_dataset, resize_trilinear
from nodulesynth.seeding import derive_seed
from nodulesynth.volume_io import LABEL_MALIGNANT

REGIMES = ("raw", "raw_weighted", "raw_synthesis")

_PRESET_BLOCKS = {
    "resnet50": (3, 4, 6, 3),
    "resnet101": (3, 4, 23, 3),
    "resnet152": (3, 8, 36, 3),
    "resnext101": (3, 4, 23, 3),
}


@dataclass
class ClassifierConfig:
    architecture: str = "desk"  # desk | resnet50 | resnet101 | resnet152 | resnext101
    desk_channels: int = 16
    desk_blocks: tuple[int, int] = (1, 1)
    pretrained_weights_path: str | None = None
    loss_mode: str = "unweighted"  # unweighted | class_weighted
    epochs: int = 8
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    augment: bool = True

    def __post_init__(self) -> None:
        if self.architecture not in ("desk", *_PRESET_BLOCKS):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.loss_mode not in ("unweighted", "class_weighted"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if any(b < 1 for b in self.desk_blocks):
            raise ValueError("block counts must be >= 1")


class BasicBlock3d(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(
                nn.Conv3d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm3d(cout)
            )

    def forward(self, x):
        identity = self.down(x) if self.down is not None else x
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + identity)


class Bottleneck3d(nn.Module):
    expansion = 4

    def __init__(self, cin: int, planes: int, stride: int = 1, groups: int = 1, base_width: int = 64):
        super().__init__()
        width = int(planes * base_width / 64.0) * groups
        cout = planes * self.expansion
        self.conv1 = nn.Conv3d(cin, width, 1, bias=False)
        self.bn1 = nn.BatchNorm3d(width)
        self.conv2 = nn.Conv3d(width, width, 3, stride=stride, padding=1, groups=groups, bias=False)
        self.bn2 = nn.BatchNorm3d(width)
        self.conv3 = nn.Conv3d(width, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm3d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(
                nn.Conv3d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm3d(cout)
            )

    def forward(self, x):
        identity = self.down(x) if self.down is not None else x
        h = F.relu(self.bn1(self.conv1(x)))
        h = F.relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        return F.relu(h + identity)


class DeskResNet3d(nn.Module):
    """Two residual stages on single-channel patches; the test-scale default."""

    def __init__(self, base: int = 16, blocks: tuple[int, int] = (1, 1)):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv3d(1, base, 3, padding=1, bias=False), nn.BatchNorm3d(base), nn.ReLU()
        )
        stage1 = [BasicBlock3d(base, base) for _ in range(blocks[0])]
        stage2 = [BasicBlock3d(base, 2 * base, stride=2)] + [
            BasicBlock3d(2 * base, 2 * base) for _ in range(blocks[1] - 1)
        ]
        self.stage1 = nn.Sequential(*stage1)
        self.stage2 = nn.Sequential(*stage2)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.fc = nn.Linear(2 * base, 2)

    def forward(self, x):
        h = self.stage2(self.stage1(self.stem(x)))
        return self.fc(self.pool(h).flatten(1))


class DeepResNet3d(nn.Module):
    """Full-depth 3D residual network (ResNet-50/101/152, ResNeXt-101)."""

    def __init__(self, blocks: Sequence[int], groups: int = 1, base_width: int = 64):
        super().__init__()
        self.conv1 = nn.Conv3d(1, 64, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm3d(64)
        self.maxpool = nn.MaxPool3d(3, stride=2, padding=1)
        cin = 64
        stages = []
        for i, (planes, count) in enumerate(zip((64, 128, 256, 512), blocks)):
            layer = []
            for b in range(count):
                stride = 2 if (b == 0 and i > 0) else 1
                layer.append(Bottleneck3d(cin, planes, stride, groups=groups, base_width=base_width))
                cin = planes * Bottleneck3d.expansion
            stages.append(nn.Sequential(*layer))
        self.stages = nn.ModuleList(stages)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.fc = nn.Linear(cin, 2)

    def forward(self, x):
        h = self.maxpool(F.relu(self.bn1(self.conv1(x))))
        for stage in self.stages:
            h = stage(h)
        return self.fc(self.pool(h).flatten(1))


def build_classifier(config: ClassifierConfig) -> nn.Module:
    """Seeded construction of the configured architecture (2 output logits)."""
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(config.seed, "classifier-init"))
        if config.architecture == "desk":
            model = DeskResNet3d(base=config.desk_channels, blocks=config.desk_blocks)
        elif config.architecture == "resnext101":
            model = DeepResNet3d(_PRESET_BLOCKS["resnext101"], groups=32, base_width=4)
        else:
            model = DeepResNet3d(_PRESET_BLOCKS[config.architecture])
    if config.pretrained_weights_path:
        load_pretrained(model, config.pretrained_weights_path)
    return model


def load_pretrained(model: nn.Module, ckpt_dir: str | Path) -> list[str]:
    """Load matching tensors from a checkpoint directory into ``model``.

    A stored first conv with 3 input channels is adapted to the model's
    single channel by summing over input channels (preserves the response
    to grayscale input). Any other shape mismatch raises, naming the layer.
    Returns the names actually loaded.
    """
    ckpt_dir = Path(ckpt_dir)
    if not ckpt_dir.exists():
        raise FileNotFoundError(f"pretrained weights not found: {ckpt_dir}")
    manifest = checkpoint.read_manifest(ckpt_dir)
    tensors = dict(model.named_parameters())
    tensors.update(dict(model.named_buffers()))
    loaded = []
    with torch.no_grad():
        for name, shape in sorted(manifest.items()):
            if name not in tensors:
                continue
            dest = tensors[name]
            arr = checkpoint.load_tensor(ckpt_dir, name, shape)
            if list(dest.shape) != list(arr.shape):
                adaptable = (
                    dest.dim() == 5
                    and arr.ndim == 5
                    and dest.shape[1] == 1
                    and arr.shape[1] == 3
                    and list(dest.shape[2:]) == list(arr.shape[2:])
                    and dest.shape[0] == arr.shape[0]
                )
                if not adaptable:
                    raise checkpoint.CheckpointError(
                        f"layer {name!r}: model shape {list(dest.shape)} != stored {list(arr.shape)}"
                    )
                arr = arr.sum(axis=1, keepdims=True)
            dest.copy_(torch.from_numpy(arr.copy()).to(dest.dtype))
            loaded.append(name)
    return loaded


def inverse_frequency_weights(class_counts: Sequence[int]) -> list[float]:
    """Weights proportional to 1/count, normalized to mean 1."""
    if any(c <= 0 for c in class_counts):
        raise ValueError(f"class counts must be positive, got {class_counts}")
    inv = [1.0 / c for c in class_counts]
    scale = len(inv) / sum(inv)
    return [w * scale for w in inv]


def weighted_ce(
    logits: torch.Tensor,
    labels: torch.Tensor,
    class_weights: Sequence[float] | torch.Tensor,
) -> torch.Tensor:
    """Mean over the batch of weight[label] * (-log softmax(logits)[label])."""
    w = torch.as_tensor(class_weights, dtype=logits.dtype, device=logits.device)
    if w.min() <= 0:
        raise ValueError("class weights must be positive")
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label outside logit range")
    nll = F.cross_entropy(logits, labels, reduction="none")
    return (w[labels] * nll).mean()


# ---------------------------------------------------------------------------
# Data handling


def _to_binary(label: int) -> int:
    return 1 if label == LABEL_MALIGNANT else 0


def _augment(raw: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random cropping (shift) and scaling; never touches the label."""
    shape = np.asarray(raw.shape)
    scale = rng.uniform(0.9, 1.1)
    scaled_shape = np.maximum((shape * scale).round().astype(int), 4)
    scaled = resize_trilinear(raw, scaled_shape)
    out = np.full(raw.shape, raw.min(), dtype=raw.dtype)
    max_shift = np.maximum((shape * 0.08).astype(int), 1)
    shift = np.array([rng.integers(-m, m + 1) for m in max_shift])
    # paste the rescaled patch around its (shifted) center
    offset = (scaled_shape - shape) // 2 + shift
    src_lo = np.maximum(offset, 0)
    dst_lo = np.maximum(-offset, 0)
    span = np.minimum(shape - dst_lo, scaled_shape - src_lo)
    dst_hi = dst_lo + span
    src_hi = src_lo + span
    out[dst_lo[0] : dst_hi[0], dst_lo[1] : dst_hi[1], dst_lo[2] : dst_hi[2]] = scaled[
        src_lo[0] : src_hi[0], src_lo[1] : src_hi[1], src_lo[2] : src_hi[2]
    ]
    return out


def _batch_tensor(samples: Sequence[PatchSample], augment_rng: np.random.Generator | None):
    arrays = []
    for s in samples:
        raw = _augment(s.raw, augment_rng) if augment_rng is not None else s.raw
        arrays.append(raw[None])
    x = torch.from_numpy(np.stack(arrays)).float()
    y = torch.tensor([_to_binary(s.label) for s in samples], dtype=torch.long)
    return x, y


def predict_scores(model: nn.Module, samples: Sequence[PatchSample], batch_size: int = 32):
    """Softmax probability of the malignant class for each sample."""
    model.eval()
    scores = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            x, _ = _batch_tensor(samples[i : i + batch_size], None)
            probs = torch.softmax(model(x), dim=1)
            scores.extend(probs[:, 1].tolist())
    return scores


def evaluate(
    model: nn.Module,
    samples: Sequence[PatchSample],
    threshold: float = 0.5,
) -> MetricsReport:
    """ACC/SEN/SPE at ``threshold`` plus threshold-free AUC on a split."""
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    scores = predict_scores(model, samples)
    labels = [_to_binary(s.label) for s in samples]
    return confusion_report(scores, labels, threshold)


def train_classifier(
    train_split: Sequence[PatchSample],
    val_split: Sequence[PatchSample],
    config: ClassifierConfig,
) -> tuple[nn.Module, list[dict]]:
    """Train and return the epoch checkpoint with the best validation AUC.

    Ties go to the earlier epoch. With ``epochs == 0`` the initial model and
    an empty history are returned.
    """
    if not train_split or (config.epochs > 0 and not val_split):
        raise ValueError("train and validation splits must be non-empty")
    model = build_classifier(config)
    if config.epochs == 0:
        return model, []

    counts = [0, 0]
    for s in train_split:
        counts[_to_binary(s.label)] += 1
    if config.loss_mode == "class_weighted":
        weights = inverse_frequency_weights([max(c, 1) for c in counts])
    else:
        weights = [1.0, 1.0]

    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    best_auc, best_params = -1.0, None
    history = []
    for epoch in range(config.epochs):
        order_rng = np.random.default_rng(derive_seed(config.seed, "order", epoch))
        aug_rng = (
            np.random.default_rng(derive_seed(config.seed, "augment", epoch))
            if config.augment
            else None
        )
        perm = order_rng.permutation(len(train_split))
        model.train()
        epoch_loss, n_batches = 0.0, 0
        for i in range(0, len(perm), config.batch_size):
            batch = [train_split[j] for j in perm[i : i + config.batch_size]]
            x, y = _batch_tensor(batch, aug_rng)
            logits = model(x)
            loss = weighted_ce(logits, y, weights)
            if not torch.isfinite(loss):
                raise RuntimeError(f"training diverged: non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        report = evaluate(model, val_split)
        history.append(
            {"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1), "val_auc": report.auc}
        )
        if report.auc > best_auc:
            best_auc = report.auc
            best_params = copy.deepcopy(model.state_dict())
    if best_params is not None:
        model.load_state_dict(best_params)
    return model, history


def select_best_epoch(aucs: Sequence[float]) -> int:
    """Index of the maximal AUC, earliest on ties."""
    best = 0
    for i, a in enumerate(aucs):
        if a > aucs[best]:
            best = i
    return best


# ---------------------------------------------------------------------------
# The three training regimes


@dataclass
class ExperimentResult:
    regime: str
    per_seed: list[MetricsReport] = field(default_factory=list)
    mean: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "per_seed": [r.__dict__ for r in self.per_seed],
            "mean": self.mean,
        }


def run_experiment(
    data_root: str | Path,
    regime: str,
    config: ClassifierConfig,
    seeds: Sequence[int],
    synthetic_dir: str | Path | None = None,
) -> ExperimentResult:
    """Train/evaluate one regime of the augmentation experiment over seeds.

    ``raw``: real training patches, unweighted loss. ``raw_weighted``: real
    patches with inverse-frequency class weights. ``raw_synthesis``: real
    plus synthetic patches from ``synthetic_dir``, unweighted loss.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    data_root = Path(data_root)
    train_split = load_patch_dataset(data_root, split="train")
    val_split = load_patch_dataset(data_root, split="val")
    test_split = load_patch_dataset(data_root, split="test")

    if regime == "raw_synthesis":
        if synthetic_dir is None or not Path(synthetic_dir).exists():
            raise FileNotFoundError(
                f"regime raw_synthesis needs a synthetic patch directory, got {synthetic_dir}"
            )
        train_split = train_split + load_patch_dataset(synthetic_dir, split="train")

    result = ExperimentResult(regime=regime)
    for seed in seeds:
        cfg = ClassifierConfig(
            architecture=config.architecture,
            desk_channels=config.desk_channels,
            desk_blocks=config.desk_blocks,
            pretrained_weights_path=config.pretrained_weights_path,
            loss_mode="class_weighted" if regime == "raw_weighted" else "unweighted",
            epochs=config.epochs,
            batch_size=config.batch_size,
            lr=config.lr,
            seed=seed,
            augment=config.augment,
        )
        model, _ = train_classifier(train_split, val_split, cfg)
        result.per_seed.append(evaluate(model, test_split))
    result.mean = mean_metrics(result.per_seed)
    return result


def experiment_table(results: Sequence[ExperimentResult]) -> str:
    groups = {
        r.regime: [(f"seed-{i}", rep) for i, rep in enumerate(r.per_seed)] for r in results
    }
    return format_metrics_table(groups)

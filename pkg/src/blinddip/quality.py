"""No-reference quality scorer: MobileNet-style backbone with a 10-way softmax head.

Trained with an EMD loss against synthetic score histograms in two stages:
head only, then head plus the last depthwise-separable block.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .images import load_image
from .scores import BIN_SCORES, NUM_BINS, ScoreDistribution, emd_loss, mean_score  # noqa: F401

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
# normalization constants published with ImageNet-pretrained backbones
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# (output channels, stride) of the 13 depthwise-separable blocks
_MOBILENET_BLOCKS = (
    (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
    (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1),
)


class ModelFormatError(ValueError):
    pass


class BackboneMismatchError(ValueError):
    pass


def _dw_separable(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cin, 3, stride, 1, groups=cin, bias=False),
        nn.BatchNorm2d(cin),
        nn.ReLU(inplace=True),
        nn.Conv2d(cin, cout, 1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class MobileNetBackbone(nn.Module):
    """Standard conv stem followed by 13 depthwise-separable blocks, global-average pooled."""

    def __init__(self, width: float = 1.0):
        super().__init__()
        c = max(8, int(32 * width))
        layers: list[nn.Module] = [
            nn.Sequential(nn.Conv2d(3, c, 3, 2, 1, bias=False), nn.BatchNorm2d(c), nn.ReLU(inplace=True))
        ]
        for out, stride in _MOBILENET_BLOCKS:
            out = max(8, int(out * width))
            layers.append(_dw_separable(c, out, stride))
            c = out
        self.features = nn.Sequential(*layers)
        self.out_channels = c

    @property
    def final_block(self) -> nn.Module:
        return self.features[-1]

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.features(x), 1).flatten(1)


class QualityNet(nn.Module):
    def __init__(self, width: float = 1.0):
        super().__init__()
        self.backbone = MobileNetBackbone(width)
        self.head = nn.Linear(self.backbone.out_channels, NUM_BINS)

    def forward(self, x):
        return F.softmax(self.head(self.backbone(x)), dim=-1)


@dataclass
class TrainSchedule:
    stage1_epochs: int = 10
    stage2_epochs: int = 20
    learning_rate: float = 0.001
    input_resize: int = 256
    train_crop: int = 224
    hflip: bool = True
    batch_size: int = 32
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.train_crop > self.input_resize:
            raise ValueError("train_crop cannot exceed input_resize")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")


@dataclass
class BiqanModel:
    net: QualityNet
    metadata: dict = field(default_factory=dict)

    @property
    def width(self) -> float:
        return float(self.metadata.get("width", 1.0))

    @property
    def input_resize(self) -> int:
        return int(self.metadata.get("input_resize", 256))

    @property
    def crop(self) -> int:
        return int(self.metadata.get("train_crop", 224))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        torch.save(self.net.state_dict(), path)
        sidecar = path.with_suffix(".json")
        meta = dict(self.metadata, format_version=MODEL_FORMAT_VERSION)
        sidecar.write_text(json.dumps(meta, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "BiqanModel":
        path = Path(path)
        sidecar = path.with_suffix(".json")
        try:
            meta = json.loads(sidecar.read_text())
        except FileNotFoundError:
            raise ModelFormatError(f"{sidecar}: metadata sidecar missing") from None
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{sidecar}: {exc}") from exc
        if meta.get("format_version") != MODEL_FORMAT_VERSION:
            raise ModelFormatError(
                f"{path}: model format {meta.get('format_version')!r}, expected {MODEL_FORMAT_VERSION}"
            )
        net = QualityNet(float(meta.get("width", 1.0)))
        try:
            net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        except Exception as exc:
            raise ModelFormatError(f"{path}: {exc}") from exc
        net.eval()
        return cls(net, meta)


def new_model(width: float = 1.0, seed: int = 0, backbone: str | Path | None = None) -> BiqanModel:
    """Randomly initialized head (from ``seed``) on a backbone.

    The backbone is loaded from ``backbone`` when given, otherwise left at
    its seeded random initialization.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = QualityNet(width)
    meta = {
        "width": width,
        "normalize_mean": list(IMAGENET_MEAN),
        "normalize_std": list(IMAGENET_STD),
        "input_resize": 256,
        "train_crop": 224,
    }
    if backbone is not None:
        load_backbone(net.backbone, backbone)
        meta["backbone"] = str(backbone)
    net.eval()
    return BiqanModel(net, meta)


def load_backbone(backbone: MobileNetBackbone, path: str | Path) -> None:
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise BackboneMismatchError(f"{path}: unreadable backbone weights ({exc})") from exc
    state = blob.get("state_dict", blob) if isinstance(blob, dict) else None
    if not isinstance(state, dict):
        raise BackboneMismatchError(f"{path}: not a state dict")
    try:
        backbone.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise BackboneMismatchError(f"{path}: {exc}") from exc


def save_backbone(backbone: MobileNetBackbone, path: str | Path, width: float) -> Path:
    path = Path(path)
    torch.save({"width": width, "state_dict": backbone.state_dict()}, path)
    return path


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)


def _normalize(x: torch.Tensor, meta: dict) -> torch.Tensor:
    mean = torch.tensor(meta.get("normalize_mean", IMAGENET_MEAN)).view(3, 1, 1)
    std = torch.tensor(meta.get("normalize_std", IMAGENET_STD)).view(3, 1, 1)
    return (x - mean) / std


def _resize(x: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(x.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False, antialias=True)[0]


def preprocess_eval(image: np.ndarray, meta: dict) -> torch.Tensor:
    """Resize to the training size, centre-crop, normalize."""
    resize, crop = int(meta.get("input_resize", 256)), int(meta.get("train_crop", 224))
    x = _resize(_to_tensor(image), resize)
    off = (resize - crop) // 2
    return _normalize(x[:, off : off + crop, off : off + crop], meta)


def preprocess_train(image: np.ndarray, meta: dict, gen: torch.Generator, hflip: bool = True) -> torch.Tensor:
    resize, crop = int(meta.get("input_resize", 256)), int(meta.get("train_crop", 224))
    x = _resize(_to_tensor(image), resize)
    top, left = (int(v) for v in torch.randint(0, resize - crop + 1, (2,), generator=gen))
    x = x[:, top : top + crop, left : left + crop]
    if hflip and bool(torch.rand((), generator=gen) < 0.5):
        x = x.flip(-1)
    return _normalize(x, meta)


def predict_distribution(image: np.ndarray, model: BiqanModel) -> ScoreDistribution:
    return predict_batch([image], model)[0]


def predict_batch(images: Sequence[np.ndarray], model: BiqanModel) -> list[ScoreDistribution]:
    model.net.eval()
    with torch.no_grad():
        x = torch.stack([preprocess_eval(im, model.metadata) for im in images])
        probs = model.net(x).double().numpy()
    # renormalize in float64 so the sum-to-one contract holds tightly
    return [ScoreDistribution(p / p.sum()) for p in probs]


def emd_loss_torch(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Batched EMD between rows of ``p`` and ``q``; returns the batch mean."""
    diff = torch.cumsum(p, dim=-1) - torch.cumsum(q, dim=-1)
    return torch.sqrt(torch.mean(diff**2, dim=-1).clamp_min(1e-12)).mean()


@dataclass
class TrainingExample:
    source_id: str
    image_path: str
    target: np.ndarray
    psnr: float = math.nan


def split_by_source(examples: Sequence[TrainingExample], fraction: float, seed: int):
    """Hold out whole source images so near-identical snapshots never straddle the split."""
    ids = sorted({e.source_id for e in examples})
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    n_val = max(1, round(fraction * len(ids))) if len(ids) > 1 and fraction > 0 else 0
    val_ids = set(ids[:n_val])
    train = [e for e in examples if e.source_id not in val_ids]
    val = [e for e in examples if e.source_id in val_ids]
    return train, val


class _ImageCache:
    def __init__(self):
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, path: str) -> np.ndarray:
        if path not in self._cache:
            self._cache[path] = load_image(path)
        return self._cache[path]


def _set_stage(net: QualityNet, stage: int) -> list[nn.Parameter]:
    """Freeze per stage and return the trainable parameters.

    Frozen modules are put in eval mode so batch-norm statistics stay fixed.
    """
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    trainable = list(net.head.parameters())
    if stage == 2:
        block = net.backbone.final_block
        block.train()
        trainable += list(block.parameters())
    for p in trainable:
        p.requires_grad_(True)
    return trainable


def _forward_staged(net: QualityNet, x: torch.Tensor, stage: int) -> torch.Tensor:
    feats = net.backbone.features
    with torch.no_grad():
        h = feats[:-1](x)
        if stage == 1:
            h = feats[-1](h)
    if stage == 2:
        h = feats[-1](h)
    h = F.adaptive_avg_pool2d(h, 1).flatten(1)
    return F.softmax(net.head(h), dim=-1)


def _evaluate(net: QualityNet, examples, meta, cache, batch_size) -> float:
    if not examples:
        return math.nan
    net.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            batch = examples[i : i + batch_size]
            x = torch.stack([preprocess_eval(cache(e.image_path), meta) for e in batch])
            q = torch.tensor(np.stack([e.target for e in batch]), dtype=torch.float32)
            total += float(emd_loss_torch(net(x), q)) * len(batch)
    return total / len(examples)


def train_biqan(
    examples: Sequence[TrainingExample],
    schedule: TrainSchedule,
    pretrained_backbone: str | Path,
    seed: int = 0,
    width: float = 1.0,
    metadata: dict | None = None,
    stage_hook=None,
) -> BiqanModel:
    """Two-stage EMD training.

    ``stage_hook(stage, event, net)`` is called with ``event`` in
    {"start", "end"} around each stage; tests use it to snapshot weights.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("empty corpus")
    model = new_model(width, seed, pretrained_backbone)
    net, meta = model.net, model.metadata
    meta.update(metadata or {})
    meta.update(input_resize=schedule.input_resize, train_crop=schedule.train_crop)
    meta["schedule"] = asdict(schedule)
    meta["seed"] = seed

    train, val = split_by_source(examples, schedule.val_fraction, seed)
    meta["val_sources"] = sorted({e.source_id for e in val})
    cache = _ImageCache()
    gen = torch.Generator().manual_seed(seed)
    history = []

    for stage, epochs in ((1, schedule.stage1_epochs), (2, schedule.stage2_epochs)):
        params = _set_stage(net, stage)
        opt = torch.optim.Adam(params, lr=schedule.learning_rate)
        if stage_hook:
            stage_hook(stage, "start", net)
        for epoch in range(epochs):
            _set_stage(net, stage)
            order = torch.randperm(len(train), generator=gen).tolist()
            total = 0.0
            for i in range(0, len(order), schedule.batch_size):
                batch = [train[j] for j in order[i : i + schedule.batch_size]]
                x = torch.stack([preprocess_train(cache(e.image_path), meta, gen, schedule.hflip) for e in batch])
                q = torch.tensor(np.stack([e.target for e in batch]), dtype=torch.float32)
                loss = emd_loss_torch(_forward_staged(net, x, stage), q)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(batch)
            val_emd = _evaluate(net, val, meta, cache, schedule.batch_size)
            row = {
                "stage": stage,
                "epoch": epoch + 1,
                "train_emd": total / max(1, len(train)),
                "val_emd": None if math.isnan(val_emd) else val_emd,
            }
            history.append(row)
            log.info("stage %d epoch %d train %.4f val %s", stage, epoch + 1, row["train_emd"], row["val_emd"])
        if stage_hook:
            stage_hook(stage, "end", net)

    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    meta["history"] = history
    return model

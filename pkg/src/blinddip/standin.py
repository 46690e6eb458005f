"""Stand-in for ImageNet-pretrained backbone weights.

The quality scorer expects a backbone that already responds to generic
image structure. When real pretrained weights are unavailable (offline,
desk-scale runs) this module produces one by training the backbone to
regress blur strength and noise level of procedurally generated scenes.
The scenes use their own seed range and never overlap corpus images.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .images import synthetic_scene
from .quality import IMAGENET_MEAN, IMAGENET_STD, MobileNetBackbone, preprocess_train, save_backbone

log = logging.getLogger(__name__)

MAX_BLUR = 2.5
MAX_NOISE = 0.15
SCENE_SEED_OFFSET = 1_000_000


def degraded_scene(index: int, rng: np.random.Generator, size: int = 64):
    """A fresh scene with random blur and noise, plus the (blur, noise) regression target.

    Noise std is drawn on a square-root scale so weak noise is well covered.
    """
    scene = synthetic_scene(size, seed=SCENE_SEED_OFFSET + index)
    blur = rng.uniform(0.0, 1.0) * MAX_BLUR
    noise = rng.uniform(0.0, 1.0) ** 2 * MAX_NOISE
    img = scene
    if blur > 0.05:
        img = gaussian_filter(img, sigma=(blur, blur, 0))
    img = np.clip(img + rng.normal(0.0, noise, size=img.shape), 0.0, 1.0)
    target = np.array([blur / MAX_BLUR, np.sqrt(noise / MAX_NOISE)], dtype=np.float32)
    return img, target


def pretrain_backbone(
    width: float = 0.25,
    seed: int = 0,
    num_images: int = 600,
    epochs: int = 4,
    batch_size: int = 32,
    lr: float = 0.002,
    image_size: int = 64,
) -> MobileNetBackbone:
    rng = np.random.default_rng(seed)
    data = [degraded_scene(i, rng, image_size) for i in range(num_images)]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        backbone = MobileNetBackbone(width)
        head = nn.Linear(backbone.out_channels, 2)
    meta = {"normalize_mean": IMAGENET_MEAN, "normalize_std": IMAGENET_STD, "input_resize": 256, "train_crop": 224}
    gen = torch.Generator().manual_seed(seed)
    params = list(backbone.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    backbone.train()
    for epoch in range(epochs):
        order = torch.randperm(len(data), generator=gen).tolist()
        total_loss = 0.0
        for i in range(0, len(order), batch_size):
            batch = [data[j] for j in order[i : i + batch_size]]
            x = torch.stack([preprocess_train(img, meta, gen) for img, _ in batch])
            y = torch.from_numpy(np.stack([t for _, t in batch]))
            loss = F.mse_loss(head(backbone(x)), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total_loss += float(loss.detach()) * len(batch)
        log.info("stand-in pretrain epoch %d mse %.4f", epoch + 1, total_loss / len(data))
    backbone.eval()
    return backbone


def write_standin_backbone(path: str | Path, width: float = 0.25, seed: int = 0, **kwargs) -> Path:
    return save_backbone(pretrain_backbone(width, seed, **kwargs), path, width)

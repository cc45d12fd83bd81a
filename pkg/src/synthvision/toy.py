"""Procedural image families for desk-scale runs.

Three 32x32 RGB classes drawn on a skin-coloured, gently shaded background:

* ``M-pox`` - several small round lesions: dark crusted core inside a pale raised rim
* ``Normal`` - plain skin with faint pores
* ``Other`` - one large irregular reddish patch with a rough surface

plus an 8x8 single-channel two-class set (gaussian spot vs. horizontal bar)
for exercising the denoiser quickly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import data
from .core import Rng

SKIN = {
    "fair": np.array([0.93, 0.78, 0.68]),
    "brown": np.array([0.74, 0.53, 0.39]),
    "dark": np.array([0.45, 0.30, 0.22]),
}


def _background(rng: Rng, size: int, tone: str) -> np.ndarray:
    base = SKIN[tone] * rng.uniform(0.94, 1.06)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    gy, gx = rng.uniform(-0.06, 0.06, size=2)
    shade = 1.0 + gy * (yy - 0.5) + gx * (xx - 0.5)
    img = base[None, None, :] * shade[..., None]
    return img + rng.normal((size, size, 1)) * 0.015


def _disc(size, cy, cx, r):
    yy, xx = np.mgrid[0:size, 0:size]
    return np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / r


def render_lesions(rng: Rng, size: int = 32, tone: str = "fair") -> np.ndarray:
    """One or two dark, speckled blobs (the lesion class)."""
    img = _background(rng, size, tone)
    core = np.array([0.40, 0.13, 0.18])
    for _ in range(int(rng.integers(1, 3))):
        r = rng.uniform(3.5, 6.0)
        cy, cx = rng.uniform(r + 1, size - 2 - r, size=2)
        mask = np.clip((1.0 - _disc(size, cy, cx, r)) * 3, 0, 1)[..., None]
        speckle = 1.0 + rng.normal((size, size, 1)) * 0.25
        img = img * (1 - 0.9 * mask) + core * speckle * 0.9 * mask
    return np.clip(img, 0, 1)


def render_normal(rng: Rng, size: int = 32, tone: str = "fair") -> np.ndarray:
    img = _background(rng, size, tone)
    for _ in range(int(rng.integers(4, 10))):
        cy, cx = rng.uniform(0, size - 1, size=2)
        d = _disc(size, cy, cx, 0.8)
        img = img * (1 - 0.08 * np.clip(1 - d, 0, 1)[..., None])
    return np.clip(img, 0, 1)


def render_other(rng: Rng, size: int = 32, tone: str = "fair") -> np.ndarray:
    img = _background(rng, size, tone)
    cy, cx = rng.uniform(size * 0.3, size * 0.7, size=2)
    ry, rx = rng.uniform(6.0, 11.0, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    angle = np.arctan2(yy - cy, xx - cx)
    wobble = 1.0 + 0.15 * np.sin(3 * angle + rng.uniform(0, 2 * np.pi))
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) / wobble
    mask = np.clip((1.0 - d) * 4, 0, 1)[..., None]
    rough = 1.0 + rng.normal((size, size, 1)) * 0.06
    patch = np.array([0.86, 0.42, 0.40]) * rough
    img = img * (1 - 0.85 * mask) + patch * 0.85 * mask
    return np.clip(img, 0, 1)


RENDERERS = {"M-pox": render_lesions, "Normal": render_normal, "Other": render_other}


def spot_bar_dataset(n_per_class: int, rng: Rng, size: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """(2n, size, size, 1) images in [-1, 1] and their class ids (0 spot, 1 bar)."""
    yy, xx = np.mgrid[0:size, 0:size]
    images, labels = [], []
    for cls in (0, 1):
        for _ in range(n_per_class):
            if cls == 0:
                cy, cx = rng.uniform(2, size - 3, size=2)
                img = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 2.0)
            else:
                row = int(rng.integers(1, size - 2))
                img = np.zeros((size, size))
                img[row : row + 2, 1 : size - 1] = 1.0
            images.append(img * 1.8 - 0.9 + rng.normal((size, size)) * 0.02)
            labels.append(cls)
    return np.clip(np.stack(images)[..., None], -1, 1), np.array(labels)


def write_toy_dataset(root, seed: int = 0, guide_size: int = 15, train: int = 100, validation: int = 15,
                      test: int = 30, tone: str = "fair", body_part: str = "arm", size: int = 32) -> dict:
    """Write the procedural family as PNGs plus two manifests.

    * ``real_manifest.json`` - real Normal/Other training images and real
      validation/test images for every class (no M-pox training records)
    * ``guides.json`` - one guide set of ``guide_size`` M-pox images

    Returns the paths of both files.
    """
    root = Path(root)
    rng = Rng(seed)
    records = []

    def emit(label, split, index, stream):
        img = RENDERERS[label](stream, size, tone)
        rel = f"real/{split}/{label}_{index:04d}.png"
        data.write_png(root / rel, img)
        records.append(data.SampleRecord(rel, label, "real", split, body_part, tone))

    for split, count in (("train", train), ("validation", validation), ("test", test)):
        for li, label in enumerate(data.LABELS):
            if split == "train" and label == "M-pox":
                continue
            for i in range(count):
                emit(label, split, i, rng.fork(hash_key(split), li, i))

    guide_paths = []
    for i in range(guide_size):
        img = render_lesions(rng.fork(99, i), size, tone)
        rel = f"guides/M-pox_{body_part}_{tone}_{i:02d}.png"
        data.write_png(root / rel, img)
        guide_paths.append(rel)

    policy = data.scaled_policy(train, validation, test, mpox_train=(100, 150), name="toy")
    real = data.DatasetManifest(records, policy, root)
    data.save_manifest(real, root / "real_manifest.json")
    guides = {"schema_version": 1, "sets": [
        {"name": f"M-pox-{body_part}-{tone}", "label": "M-pox", "body_part": body_part, "skin_tone": tone,
         "images": guide_paths}]}
    (root / "guides.json").write_text(json.dumps(guides, indent=1) + "\n", encoding="utf-8")
    return {"real_manifest": root / "real_manifest.json", "guides": root / "guides.json"}


def hash_key(text: str) -> int:
    return int.from_bytes(text.encode("utf-8")[:8].ljust(8, b"\0"), "little")


def toy_run_config(seed: int = 0, guide_size: int = 15) -> dict:
    """Run configuration for the procedural family written by :func:`write_toy_dataset`."""
    return {
        "schema_version": 1,
        "seed": seed,
        "paths": {"real_manifest": "real_manifest.json", "guides": "guides.json", "output_root": "runs"},
        "diffusion": {
            "T": 200, "beta_start": 1e-4, "beta_end": 0.05, "clip_denoised": True,
            "denoiser": {"image_size": 32, "channels": 3, "widths": [32, 64], "time_dim": 32, "embed_dim": 64},
            "base_steps": 3000, "finetune_steps": 800, "lr": 1e-3, "finetune_lr": 3e-4, "batch_size": 32, "finetune_batch_size": 16,
            "ema_decay": 0.995, "prior": {"weight": 1.0, "ratio": 1.0, "label": "Normal", "num_images": 50},
            "guide_size": guide_size, "samples_per_set": 200, "sample_batch_size": 50,
        },
        "selection": {"min_keep": 100, "max_keep": 150, "percentile": 40.0, "pool": 4},
        "model": "tiny",
        "train": {
            "batch_size": 32, "learning_rate": 1e-4, "max_epochs": 200,
            "plateau": {"patience": 10}, "early_stop": {"patience": 20},
        },
        "evaluate": {"split": "test"},
    }

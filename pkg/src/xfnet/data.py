"""Image datasets: folder loading, resizing, and synthetic two-class sets.

A dataset directory holds one subdirectory per class; sorting the directory
names defines the label order, so the conventional layout ``0_real/`` and
``1_fake/`` puts the forged class at index 1 (the positive class for AUC).

The synthetic generators produce classes separable by simple statistics, which
keeps sanity-scale training runs honest: if the pipeline cannot overfit these,
something is broken.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .tensor import Rng

_IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass
class Dataset:
    images: list           # each (3, H, W) float32 in [0, 1]
    labels: np.ndarray     # (N,) int64
    class_names: tuple[str, ...]

    def __len__(self):
        return len(self.labels)


def bilinear_resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resampling of a (C, H, W) array."""
    c, h, w = img.shape
    out_h, out_w = size
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {size}")
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32, copy=True)

    def axis_coords(n_in, n_out):
        if n_out == 1:
            return np.zeros(1)
        return np.arange(n_out) * ((n_in - 1) / (n_out - 1))

    ys = axis_coords(h, out_h)
    xs = axis_coords(w, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bottom = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def load_image(path, target_size: tuple[int, int] | None = None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except Exception as e:
        raise ValueError(f"cannot read image {path}: {e}") from None
    chw = arr.transpose(2, 0, 1)
    if target_size is not None:
        chw = bilinear_resize(chw, target_size)
    return chw


def load_dataset(root, target_size: tuple[int, int] | None = None) -> Dataset:
    """Load a class-per-directory image tree; sorted names fix the label order."""
    root = os.fspath(root)
    if not os.path.isdir(root):
        raise ValueError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in os.listdir(root)
                        if os.path.isdir(os.path.join(root, d)) and not d.startswith("."))
    if not class_dirs:
        raise ValueError(f"dataset root {root} contains no class directories")
    images, labels = [], []
    for label, d in enumerate(class_dirs):
        files = sorted(f for f in os.listdir(os.path.join(root, d))
                       if f.lower().endswith(_IMAGE_EXTENSIONS))
        if not files:
            raise ValueError(f"class directory {os.path.join(root, d)} has no images")
        for f in files:
            images.append(load_image(os.path.join(root, d, f), target_size))
            labels.append(label)
    return Dataset(images, np.asarray(labels, dtype=np.int64), tuple(class_dirs))


def split_dataset(ds: Dataset, val_fraction: float = 0.2, seed: int = 0
                  ) -> tuple[Dataset, Dataset]:
    """Deterministic stratified train/validation split."""
    if not (0.0 < val_fraction < 1.0):
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = Rng(seed).child("split")
    train_idx, val_idx = [], []
    for label in np.unique(ds.labels):
        members = np.flatnonzero(ds.labels == label)
        members = members[rng.child(int(label)).permutation(len(members))]
        n_val = max(1, int(round(val_fraction * len(members))))
        if n_val >= len(members):
            raise ValueError(f"class {label} has too few samples ({len(members)}) "
                             f"to hold out a validation share")
        val_idx.extend(members[:n_val])
        train_idx.extend(members[n_val:])
    train_idx.sort()
    val_idx.sort()

    def take(idx):
        return Dataset([ds.images[i] for i in idx], ds.labels[list(idx)],
                       ds.class_names)

    return take(train_idx), take(val_idx)


# -- synthetic classes -----------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    per_class: int = 64
    image_size: tuple[int, int] = (64, 64)
    kind: str = "frequency-texture"
    seed: int = 0

    def validate(self):
        if self.per_class < 1:
            raise ValueError(f"per_class must be >= 1, got {self.per_class}")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ValueError(f"image_size must be at least 8x8, got {self.image_size}")
        if self.kind not in ("frequency-texture", "blob-vs-stripe"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")


def _sinusoid(h, w, cycles, angle, phase):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = (xx * np.cos(angle) + yy * np.sin(angle)) / max(h, w)
    return np.sin(2.0 * np.pi * cycles * u + phase)


def _frequency_texture(h, w, label, rng: Rng) -> np.ndarray:
    # class 0: gentle low-frequency wave; class 1: strong high-frequency
    # texture with heavier noise.  Pixel variance alone separates them.
    if label == 0:
        cycles = 1.0 + 2.0 * rng.uniform((1,), dtype=np.float64)[0]
        amplitude, noise_std = 0.18, 0.02
    else:
        cycles = 8.0 + 6.0 * rng.uniform((1,), dtype=np.float64)[0]
        amplitude, noise_std = 0.30, 0.05
    angle = rng.uniform((1,), 0.0, np.pi, dtype=np.float64)[0]
    phase = rng.uniform((1,), 0.0, 2.0 * np.pi, dtype=np.float64)[0]
    base = 0.5 + amplitude * _sinusoid(h, w, cycles, angle, phase)
    base = base + rng.normal((h, w), std=noise_std, dtype=np.float64)
    return base


def _blob_vs_stripe(h, w, label, rng: Rng) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if label == 0:
        cy = h * (0.3 + 0.4 * rng.uniform((1,), dtype=np.float64)[0])
        cx = w * (0.3 + 0.4 * rng.uniform((1,), dtype=np.float64)[0])
        r2 = (min(h, w) * 0.22) ** 2
        base = 0.25 + 0.55 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r2))
    else:
        period = max(4.0, min(h, w) / 6.0)
        phase = rng.uniform((1,), 0.0, period, dtype=np.float64)[0]
        base = 0.25 + 0.55 * (((xx + yy + phase) % period) < period / 2)
    return base + rng.normal((h, w), std=0.03, dtype=np.float64)


def synth_dataset(spec: SynthSpec) -> Dataset:
    """Deterministic two-class set; every image has its own child stream."""
    spec.validate()
    h, w = spec.image_size
    make = _frequency_texture if spec.kind == "frequency-texture" else _blob_vs_stripe
    root = Rng(spec.seed).child(spec.kind)
    images, labels = [], []
    for label in (0, 1):
        for i in range(spec.per_class):
            gray = make(h, w, label, root.child(label, i))
            gray = np.clip(gray, 0.0, 1.0)
            images.append(np.repeat(gray[None, :, :], 3, axis=0).astype(np.float32))
            labels.append(label)
    return Dataset(images, np.asarray(labels, dtype=np.int64), ("real", "fake"))


def write_dataset_png(ds: Dataset, root) -> None:
    """Write a dataset as a ``<label>_<name>/NNNN.png`` tree, loadable again
    by :func:`load_dataset`.  Each file lands via a temp name and rename."""
    root = os.fspath(root)
    os.makedirs(root, exist_ok=True)
    counters = [0] * len(ds.class_names)
    dirs = []
    for idx, name in enumerate(ds.class_names):
        d = os.path.join(root, f"{idx}_{name}")
        os.makedirs(d, exist_ok=True)
        dirs.append(d)
    for img, label in zip(ds.images, ds.labels):
        hwc = np.clip(img.transpose(1, 2, 0) * 255.0 + 0.5, 0, 255).astype(np.uint8)
        out = os.path.join(dirs[label], f"{counters[label]:04d}.png")
        counters[label] += 1
        fd, tmp = tempfile.mkstemp(dir=dirs[label], suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                Image.fromarray(hwc, mode="RGB").save(fh, format="PNG")
            os.replace(tmp, out)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

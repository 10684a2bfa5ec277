"""Seed-determined synthetic corpus for the multi-class setting.

Each class is a procedural texture family (oriented stripes, smooth checker,
or a bump lattice) with class-specific frequency, orientation and color.
Normal images vary by phase, small frequency jitter, amplitude and pixel
noise.  Anomalous test images carry one localized defect - a patch swapped
in from another class, an intensity bump, or a spliced re-parameterized
texture - together with its exact binary mask.

The training split contains only normal images pooled across all classes;
every draw goes through a single generator, so a seed fully determines the
corpus.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .tensorfile import read_tensor, write_tensor

_FAMILIES = ("stripes", "checker", "blobs")
ANOMALY_KINDS = ("patch_swap", "intensity", "splice")


@dataclass
class SyntheticCorpus:
    train_images: np.ndarray   # n x H x W x 3, values in [0, 1]
    train_classes: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray    # 0 = normal, 1 = anomalous
    test_masks: np.ndarray     # n x H x W binary
    test_classes: np.ndarray
    seed: int
    n_classes: int

    @property
    def image_hw(self):
        return self.train_images.shape[1:3]


class _ClassSpec:
    def __init__(self, rng, index):
        self.family = _FAMILIES[index % len(_FAMILIES)]
        self.freq = rng.uniform(2.5, 6.0)
        self.angle = rng.uniform(0.0, np.pi)
        self.color = rng.uniform(0.45, 1.0, size=3)
        self.secondary = rng.uniform(0.6, 1.4)


def _coords(h, w):
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return yy / h, xx / w


def _texture(spec, h, w, rng, freq_mul=1.0, angle_off=0.0):
    yy, xx = _coords(h, w)
    freq = spec.freq * freq_mul * rng.uniform(0.95, 1.05)
    angle = spec.angle + angle_off
    amp = rng.uniform(0.85, 1.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    u = np.cos(angle) * xx + np.sin(angle) * yy
    if spec.family == "stripes":
        field = np.cos(2.0 * np.pi * freq * u + phase)
    elif spec.family == "checker":
        v = -np.sin(angle) * xx + np.cos(angle) * yy
        phase2 = rng.uniform(0.0, 2.0 * np.pi)
        field = np.cos(2.0 * np.pi * freq * u + phase) * \
            np.cos(2.0 * np.pi * freq * spec.secondary * v + phase2)
    else:  # blobs: a bump lattice shifted by a per-image translation
        v = -np.sin(angle) * xx + np.cos(angle) * yy
        phase2 = rng.uniform(0.0, 2.0 * np.pi)
        a = np.cos(2.0 * np.pi * freq * u + phase)
        b = np.cos(2.0 * np.pi * freq * spec.secondary * v + phase2)
        field = 2.0 * np.exp(-2.0 * ((1 - a) + (1 - b))) - 1.0
    return 0.5 + 0.5 * amp * field


def _normal_image(spec, h, w, rng, noise=0.015):
    gray = _texture(spec, h, w, rng)
    img = gray[:, :, None] * spec.color[None, None, :]
    img = img + rng.normal(0.0, noise, size=img.shape)
    return img.clip(0.0, 1.0)


def _rect_mask(h, w, rng):
    rh = int(rng.integers(max(6, h // 6), max(7, h // 3) + 1))
    rw = int(rng.integers(max(6, w // 6), max(7, w // 3) + 1))
    i0 = int(rng.integers(0, h - rh + 1))
    j0 = int(rng.integers(0, w - rw + 1))
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[i0:i0 + rh, j0:j0 + rw] = 1
    return mask


def _disk_mask(h, w, rng):
    r = int(rng.integers(max(5, h // 12), max(6, h // 7) + 1))
    ci = int(rng.integers(r, h - r))
    cj = int(rng.integers(r, w - r))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return (((yy - ci) ** 2 + (xx - cj) ** 2) <= r * r).astype(np.uint8)


def _anomalous_image(specs, class_id, h, w, rng):
    spec = specs[class_id]
    img = _normal_image(spec, h, w, rng)
    kind = ANOMALY_KINDS[int(rng.integers(0, len(ANOMALY_KINDS)))]
    if kind == "patch_swap":
        mask = _rect_mask(h, w, rng)
        others = [c for c in range(len(specs)) if c != class_id] or [class_id]
        donor = specs[others[int(rng.integers(0, len(others)))]]
        foreign = _normal_image(donor, h, w, rng)
        img = np.where(mask[:, :, None] > 0, foreign, img)
    elif kind == "intensity":
        mask = _disk_mask(h, w, rng)
        delta = rng.uniform(0.35, 0.6) * (1.0 if rng.random() < 0.5 else -1.0)
        img = img + delta * mask[:, :, None]
    else:  # splice: same class, rotated and re-scaled frequency
        mask = _rect_mask(h, w, rng)
        spliced = _texture(spec, h, w, rng,
                           freq_mul=rng.uniform(1.5, 2.2),
                           angle_off=rng.uniform(np.pi / 6, np.pi / 2))
        patch = spliced[:, :, None] * spec.color[None, None, :]
        img = np.where(mask[:, :, None] > 0, patch, img)
    return img.clip(0.0, 1.0), mask


def generate_corpus(seed, n_classes, n_train, n_test, image_hw=(64, 64)):
    """Build a deterministic corpus; trains on normals only."""
    if n_classes < 1 or n_train < 1 or n_test < 2:
        raise ConfigError(
            f"corpus needs n_classes >= 1, n_train >= 1, n_test >= 2; "
            f"got {n_classes}, {n_train}, {n_test}")
    h, w = image_hw
    rng = np.random.default_rng(seed)
    specs = [_ClassSpec(rng, c) for c in range(n_classes)]

    train_images = np.empty((n_train, h, w, 3))
    train_classes = np.empty(n_train, dtype=np.int64)
    for i in range(n_train):
        c = i % n_classes
        train_images[i] = _normal_image(specs[c], h, w, rng)
        train_classes[i] = c

    test_images = np.empty((n_test, h, w, 3))
    test_labels = np.zeros(n_test, dtype=np.int64)
    test_masks = np.zeros((n_test, h, w), dtype=np.uint8)
    test_classes = np.empty(n_test, dtype=np.int64)
    for i in range(n_test):
        c = i % n_classes
        test_classes[i] = c
        if i % 2 == 1:  # alternate so both labels appear for any n_test >= 2
            img, mask = _anomalous_image(specs, c, h, w, rng)
            test_images[i] = img
            test_masks[i] = mask
            test_labels[i] = 1
        else:
            test_images[i] = _normal_image(specs[c], h, w, rng)
    return SyntheticCorpus(train_images, train_classes, test_images, test_labels,
                           test_masks, test_classes, seed=seed, n_classes=n_classes)


def save_corpus(directory, corpus):
    os.makedirs(directory, exist_ok=True)
    write_tensor(os.path.join(directory, "train_images.omni"), corpus.train_images, "f64")
    write_tensor(os.path.join(directory, "train_classes.omni"), corpus.train_classes, "f64")
    write_tensor(os.path.join(directory, "test_images.omni"), corpus.test_images, "f64")
    write_tensor(os.path.join(directory, "test_labels.omni"), corpus.test_labels, "f64")
    write_tensor(os.path.join(directory, "test_masks.omni"), corpus.test_masks, "f64")
    write_tensor(os.path.join(directory, "test_classes.omni"), corpus.test_classes, "f64")
    with open(os.path.join(directory, "corpus.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"seed = {corpus.seed}\nn_classes = {corpus.n_classes}\n")


def load_corpus(directory):
    meta_path = os.path.join(directory, "corpus.txt")
    if not os.path.isfile(meta_path):
        raise FormatError(f"not a corpus directory (missing corpus.txt): {directory}")
    meta = {}
    with open(meta_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                k, _, v = line.partition("=")
                meta[k.strip()] = int(v.strip())

    def arr(name, dtype=np.float64):
        return read_tensor(os.path.join(directory, f"{name}.omni")).astype(dtype)

    return SyntheticCorpus(
        arr("train_images"), arr("train_classes", np.int64),
        arr("test_images"), arr("test_labels", np.int64),
        arr("test_masks", np.uint8), arr("test_classes", np.int64),
        seed=meta.get("seed", -1), n_classes=meta.get("n_classes", 0))

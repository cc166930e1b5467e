"""Procedural toy image classification data.

Images are colored geometric shapes on a gray background; the class is the
(shape, color) combination. Generation is fully deterministic per seed so
datasets never need to ship with the repository.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_COLORS = 2
SHAPES = ("square", "circle", "triangle", "plus", "diamond")
COLORS = (
    np.array([0.85, 0.25, 0.2], dtype=np.float32),
    np.array([0.2, 0.35, 0.9], dtype=np.float32),
)


@dataclass(frozen=True)
class ToyDatasetSpec:
    """Deterministic generator settings; same seed means identical bytes."""

    seed: int = 0
    count: int = 500
    classes: int = 10
    image_size: int = 32

    def __post_init__(self):
        if self.count < 1 or self.classes < 2 or self.image_size < 8:
            raise ValueError("invalid dataset spec")


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx, dy = xx - cx, yy - cy
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "plus":
        return ((np.abs(dx) <= r * 0.35) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r)
        )
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r * 1.2
    raise ValueError(f"unknown shape {kind!r}")


def generate_toy_dataset(spec: ToyDatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render ``spec.count`` images, classes assigned round-robin.

    Returns (images, labels) with images of shape (N, 3, S, S), float32 in
    [0, 1], and integer labels below ``spec.classes``.
    """
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    images = np.empty((spec.count, 3, size, size), dtype=np.float32)
    labels = np.empty(spec.count, dtype=np.int64)
    for i in range(spec.count):
        cls = i % spec.classes
        shape = SHAPES[(cls // N_COLORS) % len(SHAPES)]
        color = COLORS[cls % N_COLORS]

        background = rng.uniform(0.1, 0.2)
        img = np.full((3, size, size), background, dtype=np.float32)
        img += rng.uniform(-0.03, 0.03, size=3).astype(np.float32)[:, None, None]

        # mild jitter keeps the task learnable for a small model in a few
        # epochs while leaving a real generalization gap
        r = rng.uniform(0.36, 0.44) * size / 2
        cx = size / 2 + rng.uniform(-2.0, 2.0)
        cy = size / 2 + rng.uniform(-2.0, 2.0)
        mask = _shape_mask(shape, size, cx, cy, r)
        img[:, mask] = color[:, None]

        img += rng.normal(scale=0.03, size=img.shape).astype(np.float32)
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = cls
    return images, labels


def split_dataset(
    images: np.ndarray, labels: np.ndarray, train_fraction: float = 0.8
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Contiguous train/test split; round-robin labels keep both sides balanced."""
    n_train = int(round(len(images) * train_fraction))
    return (
        images[:n_train],
        labels[:n_train],
        images[n_train:],
        labels[n_train:],
    )


def save_dataset(path: str, images: np.ndarray, labels: np.ndarray) -> None:
    np.savez(path, images=images, labels=labels)


def load_dataset(path: str) -> tuple[np.ndarray, np.ndarray]:
    with np.load(path) as data:
        return data["images"], data["labels"]

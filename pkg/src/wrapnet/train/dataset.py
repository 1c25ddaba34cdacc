"""Synthetic multi-class spiral task used as a desk-scale benchmark."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LIFT_SEED = 20_200_707  # fixed: the lifting map is part of the task, not of the draw


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int

    @property
    def features(self) -> int:
        return self.x_train.shape[1]

    @property
    def chance(self) -> float:
        return 1.0 / self.classes

    def to_bytes(self) -> bytes:
        parts = [self.x_train, self.y_train, self.x_val, self.y_val, self.x_test, self.y_test]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)

    def with_labels_permuted(self, seed: int = 0) -> "Dataset":
        """Same inputs, labels shuffled independently of the inputs (control)."""
        rng = np.random.default_rng(seed)
        return Dataset(self.x_train, rng.permutation(self.y_train), self.x_val,
                       rng.permutation(self.y_val), self.x_test, rng.permutation(self.y_test),
                       self.classes)


def lifting_matrix(features: int = 8) -> np.ndarray:
    rng = np.random.default_rng(LIFT_SEED)
    return rng.normal(size=(2, features)) / np.sqrt(2.0)


def make_synthetic_dataset(seed: int = 0, n: int = 6000, difficulty: float = 1.0,
                           classes: int = 4, features: int = 8,
                           split=(0.7, 0.15, 0.15)) -> Dataset:
    """Interleaved spiral arms in 2-D, lifted to ``features`` dimensions.

    ``difficulty`` scales the number of turns and the angular noise.  The
    lifting is a fixed random linear map followed by standardization, so
    the task stays intrinsically two-dimensional.
    """
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, size=n)
    t = np.sqrt(rng.random(n))
    turns = 0.75 * difficulty
    angle = 2 * np.pi * (y / classes + turns * t) + rng.normal(scale=0.12 * difficulty, size=n)
    r = 0.1 + 0.9 * t
    pts = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    x = pts @ lifting_matrix(features)
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    a = int(round(split[0] * n))
    b = a + int(round(split[1] * n))
    return Dataset(x[:a], y[:a], x[a:b], y[a:b], x[b:], y[b:], classes)

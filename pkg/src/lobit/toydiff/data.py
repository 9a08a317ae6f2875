from __future__ import annotations

import numpy as np

from lobit.metrics import Rng


class ToyDataset:
    """K Gaussian blobs centred on equally spaced points of the unit circle.

    Samples and modes are divided by ``1 + 4 * std`` so that almost every
    sample lands in [-1, 1]^2; the rare remainder is clipped.
    """

    def __init__(self, n_classes: int = 8, std: float = 0.05):
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.n_classes = n_classes
        self.std = std
        self.norm = 1.0 + 4.0 * std
        angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
        self.modes = np.stack([np.cos(angles), np.sin(angles)], axis=1) / self.norm

    def sample(self, rng: Rng, n: int, classes=None):
        if classes is None:
            classes = rng.integers(self.n_classes, n)
        classes = np.asarray(classes, dtype=np.int64)
        x = self.modes[classes] + rng.normal((len(classes), 2)) * (self.std / self.norm)
        return np.clip(x, -1.0, 1.0), classes

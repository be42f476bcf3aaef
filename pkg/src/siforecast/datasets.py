"""Transition datasets: pairs ``(x_t, x_{t+tau})`` at a fixed lag."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arrayio import config_hash, read_array, read_manifest, write_array, write_manifest
from .errors import DomainError
from .interpolant import SamplePair


@dataclass
class TransitionDataset:
    x0: np.ndarray
    x1: np.ndarray
    lag: float = 1.0
    scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=float))
        self.x1 = np.atleast_2d(np.asarray(self.x1, dtype=float))
        if self.x0.shape != self.x1.shape:
            raise DomainError(f"x0 {self.x0.shape} and x1 {self.x1.shape} differ")
        if self.x0.shape[0] == 0:
            raise DomainError("dataset is empty")

    def __len__(self):
        return self.x0.shape[0]

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    def pairs(self):
        return [SamplePair(a, b) for a, b in zip(self.x0, self.x1)]

    def split(self, val_fraction: float, rng: np.random.Generator):
        """Shuffled train/validation split; validation gets ``round(n * val_fraction)`` pairs."""
        n = len(self)
        n_val = int(round(n * val_fraction))
        if n_val == 0 or n_val == n:
            return self, None
        perm = rng.permutation(n)
        tr, va = perm[n_val:], perm[:n_val]
        mk = lambda idx: TransitionDataset(self.x0[idx], self.x1[idx], self.lag, self.scale, dict(self.meta))
        return mk(np.sort(tr)), mk(np.sort(va))

    def save(self, directory, name: str = "pairs", extra: dict | None = None) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_array(directory / f"{name}_x0.bin", self.x0)
        write_array(directory / f"{name}_x1.bin", self.x1)
        manifest = {
            "name": name,
            "n_pairs": len(self),
            "dim": self.dim,
            "lag": self.lag,
            "normalization_scale": self.scale,
            "files": {"x0": f"{name}_x0.bin", "x1": f"{name}_x1.bin"},
            "meta": self.meta,
        }
        if extra:
            manifest.update(extra)
        manifest.setdefault("config_hash", config_hash(self.meta))
        path = directory / f"{name}_manifest.json"
        write_manifest(path, manifest)
        return path

    @classmethod
    def load(cls, manifest_path) -> "TransitionDataset":
        manifest_path = Path(manifest_path)
        m = read_manifest(manifest_path)
        base = manifest_path.parent
        return cls(
            read_array(base / m["files"]["x0"]),
            read_array(base / m["files"]["x1"]),
            lag=float(m["lag"]),
            scale=float(m["normalization_scale"]),
            meta=m.get("meta", {}),
        )

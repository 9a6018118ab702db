"""Explicit Gaussian scene representation.

Parameters are stored unconstrained for optimization: rotation as a
(re-normalized) quaternion, scale as log-scale, opacity as a logit.  The
grayscale appearance is a single scalar per Gaussian (spherical-harmonics
degree 0); the background level is fixed, not optimized.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .quat import quat_to_rot

CHECKPOINT_MAGIC = b"EGS1"
_FLOATS_PER_GAUSSIAN = 14   # mean 3, quat 4, log_scale 3, opacity_logit 1, intensity 1, pad 2


class Gaussian3D(NamedTuple):
    """One Gaussian's parameters (convenience view; scenes store arrays)."""

    mean: np.ndarray
    rotation: np.ndarray      # quaternion (w, x, y, z)
    log_scale: np.ndarray
    opacity_logit: float
    intensity: float


@dataclass
class GaussianScene:
    means: np.ndarray           # (N, 3)
    quats: np.ndarray           # (N, 4), re-normalized after optimizer steps
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    intensities: np.ndarray     # (N,) grayscale appearance >= 0
    background: float = 0.0

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.quats = np.atleast_2d(np.asarray(self.quats, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales, dtype=np.float64))
        self.opacity_logits = np.atleast_1d(np.asarray(self.opacity_logits, dtype=np.float64))
        self.intensities = np.atleast_1d(np.asarray(self.intensities, dtype=np.float64))
        n = len(self.means)
        if not (len(self.quats) == len(self.log_scales) == len(self.opacity_logits)
                == len(self.intensities) == n):
            raise ValueError("parameter arrays must share one length")
        if not 0.0 <= self.background <= 1.0:
            raise ValueError("background must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.means)

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.means[i], self.quats[i], self.log_scales[i],
                          float(self.opacity_logits[i]), float(self.intensities[i]))

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.means.copy(), self.quats.copy(),
                             self.log_scales.copy(), self.opacity_logits.copy(),
                             self.intensities.copy(), self.background)

    @classmethod
    def from_gaussians(cls, gaussians, background: float = 0.0) -> "GaussianScene":
        return cls(
            means=np.array([g.mean for g in gaussians], dtype=np.float64),
            quats=np.array([g.rotation for g in gaussians], dtype=np.float64),
            log_scales=np.array([g.log_scale for g in gaussians], dtype=np.float64),
            opacity_logits=np.array([g.opacity_logit for g in gaussians], dtype=np.float64),
            intensities=np.array([g.intensity for g in gaussians], dtype=np.float64),
            background=background,
        )

    @classmethod
    def empty(cls, background: float = 0.0) -> "GaussianScene":
        z = np.zeros((0, 3))
        return cls(z, np.zeros((0, 4)), z.copy(), np.zeros(0), np.zeros(0), background)


def covariance_3d(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(exp(log_scale)); accepts (4,)/(3,) or batches.

    Built as M M^T with M = R S, so the result is exactly symmetric (each
    mirrored entry sums the same commutative products).
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    log_scale = np.asarray(log_scale, dtype=np.float64)
    single = rotation.ndim == 1
    R = quat_to_rot(np.atleast_2d(rotation))
    M = R * np.exp(np.atleast_2d(log_scale))[:, None, :]
    sigma = np.einsum("nij,nkj->nik", M, M)
    return sigma[0] if single else sigma


def save_scene(path: str, scene: GaussianScene) -> None:
    """Write the EGS1 checkpoint (atomic: temp file then rename).

    Layout: magic "EGS1", count as little-endian uint64, then per Gaussian 14
    little-endian float32 (mean 3, quaternion 4, log_scale 3, opacity_logit,
    intensity, 2 zero pads), then the background as one float32.
    """
    n = len(scene)
    block = np.zeros((n, _FLOATS_PER_GAUSSIAN), dtype="<f4")
    block[:, 0:3] = scene.means
    block[:, 3:7] = scene.quats
    block[:, 7:10] = scene.log_scales
    block[:, 10] = scene.opacity_logits
    block[:, 11] = scene.intensities
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", n))
        f.write(block.tobytes())
        f.write(np.float32(scene.background).astype("<f4").tobytes())
    os.replace(tmp, path)


def load_scene(path: str) -> GaussianScene:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic: {magic!r}")
        (n,) = struct.unpack("<Q", f.read(8))
        data = f.read(n * _FLOATS_PER_GAUSSIAN * 4)
        if len(data) != n * _FLOATS_PER_GAUSSIAN * 4:
            raise ValueError("truncated checkpoint body")
        tail = f.read(4)
        if len(tail) != 4:
            raise ValueError("missing background value")
    block = np.frombuffer(data, dtype="<f4").reshape(n, _FLOATS_PER_GAUSSIAN).astype(np.float64)
    background = float(np.frombuffer(tail, dtype="<f4")[0])
    if n == 0:
        return GaussianScene.empty(background)
    return GaussianScene(
        means=block[:, 0:3],
        quats=block[:, 3:7],
        log_scales=block[:, 7:10],
        opacity_logits=block[:, 10],
        intensities=block[:, 11],
        background=background,
    )

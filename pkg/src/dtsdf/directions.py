"""The six axis-aligned directions of the directional TSDF and their membership weight."""

from __future__ import annotations

from enum import IntEnum

import numpy as np


class Direction(IntEnum):
    X_POS = 0
    X_NEG = 1
    Y_POS = 2
    Y_NEG = 3
    Z_POS = 4
    Z_NEG = 5

    @property
    def vector(self) -> np.ndarray:
        return DIRECTION_VECTORS[self].copy()

    @property
    def label(self) -> str:
        return ("X+", "X-", "Y+", "Y-", "Z+", "Z-")[self]


DIRECTION_VECTORS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64
)
DIRECTION_VECTORS.setflags(write=False)

DEFAULT_THETA = np.deg2rad(65.0)


def _check_theta(theta: float) -> None:
    if not (np.pi / 4 < theta <= np.pi / 2):
        raise ValueError(f"theta must lie in (pi/4, pi/2], got {theta}")


def direction_weights(normals, theta: float = DEFAULT_THETA) -> np.ndarray:
    """Membership weight of unit normals ``(..., 3)`` for all six directions, ``(..., 6)``.

    Linear ramp in the angle ``a`` between normal and axis: one up to
    ``pi/2 - theta``, zero from ``theta`` on.
    """
    _check_theta(theta)
    normals = np.asarray(normals, dtype=np.float64)
    cos = np.clip(normals @ DIRECTION_VECTORS.T, -1.0, 1.0)
    alpha = np.arccos(cos)
    return np.clip((theta - alpha) / (2.0 * theta - np.pi / 2.0), 0.0, 1.0)


def direction_weight(n, direction: int, theta: float = DEFAULT_THETA) -> np.ndarray:
    """Membership weight of normal(s) ``n`` for a single direction."""
    _check_theta(theta)
    n = np.asarray(n, dtype=np.float64)
    cos = np.clip(n @ DIRECTION_VECTORS[int(direction)], -1.0, 1.0)
    return np.clip((theta - np.arccos(cos)) / (2.0 * theta - np.pi / 2.0), 0.0, 1.0)

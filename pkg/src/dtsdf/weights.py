"""Depth-dependent measurement weights shared by fusion and tracking."""

from __future__ import annotations

import numpy as np

WEIGHT_MODES = ("constant", "xia", "nguyen", "proposed")
NGUYEN_ANGLE_LIMIT = np.deg2rad(60.0)


class OutOfRange(ValueError):
    pass


def nguyen_sigma(z, view_angle=0.0) -> np.ndarray:
    """Axial noise model of a structured-light sensor (meters).

    The angular term only kicks in above 60 degrees of view angle.
    """
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(view_angle, dtype=np.float64)
    base = 0.0012 + 0.0019 * (z - 0.4) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        extra = 0.0001 / np.sqrt(z) * a**2 / (np.pi / 2 - a) ** 2
    return base + np.where(a > NGUYEN_ANGLE_LIMIT, extra, 0.0)


def icp_weight(z, z_min: float, z_max: float, mode: str = "proposed", view_angle=0.0, check: bool = True) -> np.ndarray:
    """Per-measurement weight in terms of depth ``z``.

    ``constant`` is 1; ``xia`` falls from 1 at ``z_min`` to 0 at ``z_max`` in
    inverse squared depth; ``nguyen`` is the ratio of the noise level at
    ``z_min`` to the noise at ``z``; ``proposed`` is ``1/(z + 1 - z_min)^2``.
    """
    z = np.asarray(z, dtype=np.float64)
    if check and np.any((z < z_min) | (z > z_max)):
        raise OutOfRange(f"depth outside [{z_min}, {z_max}]")
    if mode == "constant":
        return np.ones_like(z)
    if mode == "xia":
        return (1.0 / z**2 - 1.0 / z_max**2) / (1.0 / z_min**2 - 1.0 / z_max**2)
    if mode == "nguyen":
        return nguyen_sigma(z_min, 0.0) / nguyen_sigma(z, view_angle)
    if mode == "proposed":
        return 1.0 / (z + (1.0 - z_min)) ** 2
    raise ValueError(f"unknown weight mode {mode!r}")

"""sRGB <-> CIELAB (D65) conversion on float images.

Images are plain ``float64`` arrays of shape ``(H, W, 3)``. RGB values live in
``[0, 1]``; Lab channels are ``(L*, a*, b*)`` with ``L*`` in ``[0, 100]``.
"""

from __future__ import annotations

import numpy as np

# IEC 61966-2-1 primaries, D65
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
# white point taken from the matrix itself so that (1, 1, 1) maps to a* = b* = 0
WHITE_D65 = _RGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0

L_RANGE = (0.0, 100.0)
AB_RANGE = (-128.0, 127.0)


def _as_image(img, name="img") -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim < 1 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have a trailing channel axis of size 3, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    # negative linear values only occur out of gamut; keep the branch finite
    pos = np.maximum(c, 0.0)
    # 0.04045 / 12.92 rather than the rounded 0.0031308 so the two branches invert each other
    return np.where(c <= 0.04045 / 12.92, 12.92 * c, 1.055 * pos ** (1.0 / 2.4) - 0.055)


def _f(t):
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _f_inv(t):
    return np.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_to_xyz(rgb) -> np.ndarray:
    return srgb_to_linear(_as_image(rgb, "rgb")) @ _RGB_TO_XYZ.T


def xyz_to_lab(xyz) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64)
    fx, fy, fz = np.moveaxis(_f(xyz / WHITE_D65), -1, 0)
    return np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)


def lab_to_xyz(lab) -> np.ndarray:
    L, a, b = np.moveaxis(np.asarray(lab, dtype=np.float64), -1, 0)
    fy = (L + 16.0) / 116.0
    f = np.stack([fy + a / 500.0, fy, fy - b / 200.0], axis=-1)
    return _f_inv(f) * WHITE_D65


def rgb_to_lab(rgb) -> np.ndarray:
    """Convert an sRGB image in ``[0, 1]`` to CIELAB (D65)."""
    return xyz_to_lab(rgb_to_xyz(rgb))


def lab_to_rgb(lab, clip: bool = True) -> np.ndarray:
    """Convert CIELAB (D65) back to sRGB.

    Out-of-gamut results are clamped to ``[0, 1]`` per channel unless
    ``clip=False``.
    """
    lin = lab_to_xyz(_as_image(lab, "lab")) @ _XYZ_TO_RGB.T
    rgb = linear_to_srgb(lin)
    return np.clip(rgb, 0.0, 1.0) if clip else rgb


def clamp_lab(lab: np.ndarray) -> tuple[np.ndarray, int]:
    """Clamp to the valid Lab box; returns the clamped array and the number of clamped values."""
    lo = np.array([L_RANGE[0], AB_RANGE[0], AB_RANGE[0]])
    hi = np.array([L_RANGE[1], AB_RANGE[1], AB_RANGE[1]])
    clamped = np.clip(lab, lo, hi)
    return clamped, int(np.count_nonzero(clamped != lab))

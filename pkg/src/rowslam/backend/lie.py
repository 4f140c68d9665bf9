"""SO(3)/SE(3) tangent-space operations used by the batch optimizer.

Tangent vectors are ordered (omega, v): rotation first, translation
second. Poses are retracted on the right: ``P <- P * Exp(delta)``.
"""

from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    s = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + s + 0.5 * (s @ s)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * s + b * (s @ s)


def so3_log(rot: np.ndarray) -> np.ndarray:
    cos_theta = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    w = np.array([rot[2, 1] - rot[1, 2],
                  rot[0, 2] - rot[2, 0],
                  rot[1, 0] - rot[0, 1]])
    if theta < _SMALL_ANGLE:
        return 0.5 * w
    if theta > np.pi - 1e-6:
        # near pi the off-diagonal formula degenerates; use the diagonal
        d = np.diagonal(rot)
        axis_sq = np.maximum((d - cos_theta) / (1.0 - cos_theta), 0.0)
        axis = np.sqrt(axis_sq)
        # fix signs from the largest off-diagonal products
        k = int(np.argmax(axis))
        signs = np.sign(np.array([rot[k, 0], rot[k, 1], rot[k, 2]])
                        + np.array([rot[0, k], rot[1, k], rot[2, k]]))
        signs[k] = 1.0
        axis = axis * np.where(signs == 0, 1.0, signs)
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * w


def so3_jr_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse of the right Jacobian of SO(3) at ``phi``."""
    theta = np.linalg.norm(phi)
    s = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * s + (1.0 / 12.0) * (s @ s)
    coeff = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * s + coeff * (s @ s)


def se3_exp(delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """SE(3) exponential of a 6-vector (omega, v) -> (R, t)."""
    delta = np.asarray(delta, dtype=float).reshape(6)
    omega = delta[:3]
    v = delta[3:]
    rot = so3_exp(omega)
    theta = np.linalg.norm(omega)
    s = skew(omega)
    if theta < _SMALL_ANGLE:
        vmat = np.eye(3) + 0.5 * s + (1.0 / 6.0) * (s @ s)
    else:
        vmat = (np.eye(3)
                + (1.0 - np.cos(theta)) / theta**2 * s
                + (theta - np.sin(theta)) / theta**3 * (s @ s))
    return rot, vmat @ v


def retract(rotation: np.ndarray, translation: np.ndarray,
            delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right-multiply a pose by Exp(delta)."""
    dr, dt = se3_exp(delta)
    return rotation @ dr, rotation @ dt + translation

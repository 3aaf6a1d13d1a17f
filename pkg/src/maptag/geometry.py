"""Rigid transforms and small rotation helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation, applied as p -> R @ p + t.

    Convention used throughout: a body pose stores the body axes as the
    columns of ``rotation`` and the body origin in ``translation``, both
    expressed in the outer (map) frame.  ``apply`` therefore carries
    body-frame coordinates into the map frame; ``inverse().apply`` carries
    map points into the body frame.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def validate(self, tol: float = 1e-9) -> None:
        R = self.rotation
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(self.translation)):
            raise ValueError("transform has non-finite entries")
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err > tol:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.3e})")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation has negative determinant")

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float).reshape(4, 4)
        return RigidTransform(m[:3, :3], m[:3, 3])


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def euler_zyx_to_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    return rotation_z(yaw) @ rotation_y(pitch) @ rotation_x(roll)


def matrix_to_euler_zyx(R: np.ndarray) -> tuple[float, float, float]:
    """Inverse of euler_zyx_to_matrix; returns (yaw, pitch, roll) in radians.

    At the pitch = +/-90 deg gimbal singularity roll is set to zero and yaw
    absorbs the remaining in-plane rotation.
    """
    R = np.asarray(R, dtype=float)
    sp = -R[2, 0]
    sp = min(1.0, max(-1.0, sp))
    pitch = np.arcsin(sp)
    if abs(sp) < 1.0 - 1e-12:
        yaw = np.arctan2(R[1, 0], R[0, 0])
        roll = np.arctan2(R[2, 1], R[2, 2])
    else:
        yaw = np.arctan2(-R[0, 1], R[1, 1])
        roll = 0.0
    return float(yaw), float(pitch), float(roll)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation from a QR decomposition with sign fix."""
    A = rng.normal(size=(3, 3))
    Q, R = np.linalg.qr(A)
    Q = Q @ np.diag(np.sign(np.diag(R)))
    if np.linalg.det(Q) < 0:
        Q[:, 2] = -Q[:, 2]
    return Q

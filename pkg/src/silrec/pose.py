"""Rotation parameterization and orthographic projection with gradients.

Convention (documented, fixed): R = Rz(tilt) @ Rx(elevation) @ Ry(azimuth),
i.e. azimuth spins the object about the vertical y-ish camera axis first,
elevation pitches about x, tilt rolls about the viewing axis z.  The camera
is the constant orthographic matrix K = [[1,0,0],[0,1,0]] (drop rotated z).

An optional 2D similarity (isotropic scale plus translation) can be applied
after projection; it is an extension beyond the scale-free projection model
and is off unless explicitly passed / enabled in the inference config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

K_ORTHO = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class Pose:
    """Object rotation as azimuth / elevation / tilt, radians, unbounded."""

    azimuth: float = 0.0
    elevation: float = 0.0
    tilt: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.azimuth, self.elevation, self.tilt)):
            raise ValueError("pose angles must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, self.tilt])

    @staticmethod
    def from_array(v) -> "Pose":
        return Pose(float(v[0]), float(v[1]), float(v[2]))

    def degrees(self) -> dict:
        return {
            "azimuth": math.degrees(self.azimuth),
            "elevation": math.degrees(self.elevation),
            "tilt": math.degrees(self.tilt),
        }


@dataclass(frozen=True)
class ImageAlign:
    """Optional post-projection similarity: q -> scale * q + shift."""

    scale: float = 1.0
    shift_x: float = 0.0
    shift_y: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.scale, self.shift_x, self.shift_y])

    @staticmethod
    def from_array(v) -> "ImageAlign":
        return ImageAlign(float(v[0]), float(v[1]), float(v[2]))


def _ry(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rx(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rz(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _dry(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drx(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _drz(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def rotation_matrix(pose: Pose) -> np.ndarray:
    """3x3 rotation Rz(tilt) @ Rx(elevation) @ Ry(azimuth)."""
    return _rz(pose.tilt) @ _rx(pose.elevation) @ _ry(pose.azimuth)


def rotation_matrix_derivs(pose: Pose):
    """(R, dR/dazimuth, dR/delevation, dR/dtilt)."""
    ry, rx, rz = _ry(pose.azimuth), _rx(pose.elevation), _rz(pose.tilt)
    return (
        rz @ rx @ ry,
        rz @ rx @ _dry(pose.azimuth),
        rz @ _drx(pose.elevation) @ ry,
        _drz(pose.tilt) @ rx @ ry,
    )


def project(cloud: np.ndarray, pose: Pose, align: ImageAlign | None = None) -> np.ndarray:
    """Orthographic projection of an (N, 3) cloud to (N, 2) image points."""
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) cloud, got {pts.shape}")
    q = pts @ (K_ORTHO @ rotation_matrix(pose)).T
    if align is not None:
        q = align.scale * q + np.array([align.shift_x, align.shift_y])
    return q


@dataclass
class ProjectGrads:
    points: np.ndarray  # (N, 3)
    angles: np.ndarray  # (3,) azimuth, elevation, tilt
    align: np.ndarray | None  # (3,) scale, shift_x, shift_y (when align given)


def project_grad(cloud: np.ndarray, pose: Pose, upstream: np.ndarray,
                 align: ImageAlign | None = None) -> ProjectGrads:
    """Chain-rule gradients of ``sum(upstream * project(cloud, pose, align))``."""
    pts = np.asarray(cloud, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (len(pts), 2):
        raise ValueError(f"upstream must be ({len(pts)}, 2), got {g.shape}")
    r, da, de, dt = rotation_matrix_derivs(pose)
    scale = align.scale if align is not None else 1.0
    p = K_ORTHO @ r
    g_points = scale * (g @ p)
    g_angles = np.array([
        scale * float(np.sum(g * (pts @ (K_ORTHO @ da).T))),
        scale * float(np.sum(g * (pts @ (K_ORTHO @ de).T))),
        scale * float(np.sum(g * (pts @ (K_ORTHO @ dt).T))),
    ])
    g_align = None
    if align is not None:
        base = pts @ p.T
        g_align = np.array([float(np.sum(g * base)), float(g[:, 0].sum()), float(g[:, 1].sum())])
    return ProjectGrads(g_points, g_angles, g_align)

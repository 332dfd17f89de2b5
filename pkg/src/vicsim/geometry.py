"""Camera, view/projection matrices and world-to-screen projection.

World space is z-up.  The view matrix follows the usual right-handed camera
convention (camera looks down -z in view space) and the projection is an
OpenGL-style perspective, so ``clip.w`` is the distance in front of the eye.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidMatrix

W_EPSILON = 1e-6
MAX_PITCH = math.radians(89.0)


def forward_vector(yaw: float, pitch: float) -> np.ndarray:
    cp = math.cos(pitch)
    return np.array([cp * math.cos(yaw), cp * math.sin(yaw), math.sin(pitch)])


def view_matrix(eye: Sequence[float], yaw: float, pitch: float) -> np.ndarray:
    """World -> view transform; rows are the camera right, up and back axes."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    fwd = (cp * cy, cp * sy, sp)
    # right = fwd x world-up, normalised; |fwd_xy| = cos(pitch)
    right = (sy, -cy, 0.0)
    up = (right[1] * fwd[2] - right[2] * fwd[1],
          right[2] * fwd[0] - right[0] * fwd[2],
          right[0] * fwd[1] - right[1] * fwd[0])
    ex, ey, ez = eye
    rows = (right, up, (-fwd[0], -fwd[1], -fwd[2]))
    return np.array([[r[0], r[1], r[2], -(r[0] * ex + r[1] * ey + r[2] * ez)] for r in rows]
                    + [[0.0, 0.0, 0.0, 1.0]])


def perspective(fov_y_deg: float, aspect: float, near: float, far: float) -> np.ndarray:
    f = 1.0 / math.tan(math.radians(fov_y_deg) / 2)
    m = np.zeros((4, 4))
    m[0, 0] = f / aspect
    m[1, 1] = f
    m[2, 2] = (far + near) / (near - far)
    m[2, 3] = 2 * far * near / (near - far)
    m[3, 2] = -1.0
    return m


def world_to_screen(point: Sequence[float], view_proj, screen=(1280, 720)) -> Optional[tuple[float, float]]:
    """Project a world point to pixel coordinates, or None if behind the camera."""
    m = np.asarray(view_proj, dtype=float).reshape(-1).tolist()
    if len(m) != 16 or not all(math.isfinite(v) for v in m):
        raise InvalidMatrix("view-projection matrix must be 16 finite values")
    x, y, z = point
    cw = m[12] * x + m[13] * y + m[14] * z + m[15]
    if cw <= W_EPSILON:
        return None
    cx = m[0] * x + m[1] * y + m[2] * z + m[3]
    cy = m[4] * x + m[5] * y + m[6] * z + m[7]
    w, h = screen
    return ((cx / cw + 1.0) * 0.5 * w, (1.0 - cy / cw) * 0.5 * h)


def project_many(points: np.ndarray, view_proj: np.ndarray, screen=(1280, 720)):
    """Vectorised projection; returns (sx, sy, clip_w).  Points with w <= eps get NaN."""
    pts = np.asarray(points, dtype=float)
    clip = pts @ view_proj[:, :3].T + view_proj[:, 3]
    cw = clip[:, 3]
    ok = cw > W_EPSILON
    safe = np.where(ok, cw, 1.0)
    w, h = screen
    sx = np.where(ok, (clip[:, 0] / safe + 1.0) * 0.5 * w, np.nan)
    sy = np.where(ok, (1.0 - clip[:, 1] / safe) * 0.5 * h, np.nan)
    return sx, sy, cw


def entity_boxes(positions: np.ndarray, view_proj: np.ndarray, screen, height: float, width: float):
    """Screen boxes around the projected feet/head pair of each entity.

    Returns (x0, y0, x1, y1, depth, valid).  valid is False when either end is
    behind the camera; the box values of such rows are meaningless.
    """
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    m = np.asarray(view_proj, dtype=float)
    # feet and head share one product; the head only adds height * column z
    feet = pos @ m[:, :3].T + m[:, 3]
    head = feet + height * m[:, 2]
    fw, hw = feet[:, 3], head[:, 3]
    valid = (fw > W_EPSILON) & (hw > W_EPSILON)
    inv_f = 1.0 / np.where(valid, fw, 1.0)
    inv_h = 1.0 / np.where(valid, hw, 1.0)
    w, h = screen
    fy = (1.0 - feet[:, 1] * inv_f) * (0.5 * h)
    hy = (1.0 - head[:, 1] * inv_h) * (0.5 * h)
    xc = (feet[:, 0] * inv_f + head[:, 0] * inv_h + 2.0) * (0.25 * w)
    top = np.minimum(fy, hy)
    bottom = np.maximum(fy, hy)
    half = (bottom - top) * (0.5 * width / height)
    return xc - half, top, xc + half, bottom, fw, valid

"""Homogeneous 2-D transform algebra for square rasters.

Two matrix roles are used throughout the package and must not be mixed:

* ``affine`` -- the resampling matrix.  It acts as a *backward* map in
  normalized output coordinates: an output pixel at normalized ``(x, y)``
  samples the source at ``M @ (x, y, 1)``.  ``x`` runs along columns,
  ``y`` along rows, and ``x = (col - (L-1)/2) / (L/2)`` for side ``L``
  (pixel centers sit at integer indices, the image center at ``(L-1)/2``).
  With this convention a positive rotation angle turns the image content
  clockwise on screen, and a rigid matrix with translation entries
  ``(-dx/(L/2), -dy/(L/2))`` shifts content by ``dx`` columns and ``dy``
  rows.

* ``coord`` -- the pixel-flow matrix.  It acts as a *forward* map on
  homogeneous pixel coordinates in ``(row, col)`` order: content at pixel
  ``(r, c)`` of the moving plane lands at ``M @ (r, c, 1)`` on the fixed
  plane.  Note the axis order is swapped relative to the translation
  parameters: a parametric shift ``(dx, dy)`` appears as ``(dy, dx)`` in
  the pixel-flow translation column.

Rigid/similarity matrices of either role have an upper-left block of the
form ``k * [[cos t, sin t], [-sin t, cos t]]`` with ``k = 1/s`` (affine)
or ``k = s`` (coord).  The translation conversion laws between the two
roles mix ``(L-1)/2`` and ``L/2`` factors; they are implemented exactly
as derived and are validated against a brute-force pixel-flow oracle in
the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParam, NotSimilarity, RoleMismatch, SingularTransform

ROLE_AFFINE = "affine"
ROLE_COORD = "coord"

_STRUCTURE_TOL = 1e-6


@dataclass(frozen=True)
class TransformParams:
    """Parametric rigid/similarity transform on an L x L raster.

    theta: rotation in radians, positive = clockwise on screen.
    scale: isotropic scale ratio (> 0); the registration pipeline keeps
           scale == 1, but the conversion laws support any positive value.
    dx, dy: content translation in pixels along columns / rows.
    side: raster side length in pixels.
    """

    theta: float = 0.0
    scale: float = 1.0
    dx: float = 0.0
    dy: float = 0.0
    side: int = 256

    def __post_init__(self):
        vals = (self.theta, self.scale, self.dx, self.dy, self.side)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidParam(f"non-finite transform parameter: {vals}")
        if self.scale <= 0:
            raise InvalidParam(f"scale must be positive, got {self.scale}")
        if self.side < 2:
            raise InvalidParam(f"side must be >= 2, got {self.side}")

    @property
    def theta_deg(self) -> float:
        return math.degrees(self.theta)

    def to_json_dict(self) -> dict:
        return {
            "theta_deg": self.theta_deg,
            "scale": self.scale,
            "dx": self.dx,
            "dy": self.dy,
            "side": self.side,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TransformParams":
        return cls(
            theta=math.radians(float(d["theta_deg"])),
            scale=float(d.get("scale", 1.0)),
            dx=float(d.get("dx", 0.0)),
            dy=float(d.get("dy", 0.0)),
            side=int(d["side"]),
        )


@dataclass(frozen=True)
class Mat3:
    """3x3 homogeneous matrix tagged with its role and the side it was built for."""

    m: np.ndarray
    role: str
    side: int

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        if m.shape != (3, 3):
            raise InvalidParam(f"expected 3x3 matrix, got shape {m.shape}")
        if not np.isfinite(m).all():
            raise InvalidParam("matrix contains non-finite entries")
        if not (m[2, 0] == 0.0 and m[2, 1] == 0.0 and m[2, 2] == 1.0):
            raise InvalidParam(f"bottom row must be [0, 0, 1], got {m[2]}")
        if self.role not in (ROLE_AFFINE, ROLE_COORD):
            raise InvalidParam(f"unknown matrix role {self.role!r}")
        if self.side < 2:
            raise InvalidParam(f"side must be >= 2, got {self.side}")
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    def block(self) -> np.ndarray:
        """Upper-left 2x2 block."""
        return self.m[:2, :2]

    def translation(self) -> np.ndarray:
        """Third-column translation entries."""
        return self.m[:2, 2]

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map an (n, 2) array of points through the matrix."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self.block().T + self.translation()

    def to_json_dict(self) -> dict:
        return {"role": self.role, "side": self.side, "m": [float(v) for v in self.m.ravel()]}

    @classmethod
    def from_json_dict(cls, d: dict) -> "Mat3":
        m = np.array(d["m"], dtype=float).reshape(3, 3)
        return cls(m=m, role=str(d["role"]), side=int(d["side"]))

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "Mat3":
        return cls.from_json_dict(json.loads(s))


def _rot_block(theta: float, k: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[k * c, k * s], [-k * s, k * c]])


def _similarity_parts(m: Mat3) -> tuple[float, float]:
    """Return (theta, k) of the 2x2 block, validating similarity structure."""
    b = m.block()
    k = math.hypot(b[0, 0], b[0, 1])
    if k < 1e-12:
        raise SingularTransform("2x2 block is numerically zero")
    if abs(b[0, 0] - b[1, 1]) > _STRUCTURE_TOL * max(k, 1.0) or abs(
        b[0, 1] + b[1, 0]
    ) > _STRUCTURE_TOL * max(k, 1.0):
        raise NotSimilarity(f"block {b.tolist()} is not rotation + isotropic scale")
    return math.atan2(b[0, 1], b[0, 0]), k


def build_affine(p: TransformParams) -> Mat3:
    """Resampling matrix for the parametric transform.

    Equals T(t) @ R(theta) @ S(1/s) with translation entries
    t = (-dx/(L/2), -dy/(L/2)); the sign inversion and the 1/s block are
    what make the backward map move content forward by (dx, dy) and scale
    it up by s.
    """
    half = p.side / 2.0
    m = np.eye(3)
    m[:2, :2] = _rot_block(p.theta, 1.0 / p.scale)
    m[0, 2] = -p.dx / half
    m[1, 2] = -p.dy / half
    return Mat3(m=m, role=ROLE_AFFINE, side=p.side)


def _centered_rs(theta: float, scale: float, side: int) -> np.ndarray:
    """Pixel-flow matrix of a rotation+scale about the raster center."""
    c = (side - 1) / 2.0
    block = _rot_block(theta, scale)
    m = np.eye(3)
    m[:2, :2] = block
    m[:2, 2] = np.array([c, c]) - block @ np.array([c, c])
    return m


def build_coord(p: TransformParams) -> Mat3:
    """Pixel-flow matrix for the parametric transform.

    The translation (in swapped (dy, dx) order) applies before the
    rotation/scale about the raster centroid, mirroring the order of
    operations that the resampling matrix encodes.
    """
    t = np.eye(3)
    t[0, 2] = p.dy
    t[1, 2] = p.dx
    m = _centered_rs(p.theta, p.scale, p.side) @ t
    return Mat3(m=m, role=ROLE_COORD, side=p.side)


def affine_to_coord(m: Mat3, side: int | None = None) -> Mat3:
    """Convert a resampling matrix to the pixel-flow matrix of the same motion.

    The rotation angle carries over unchanged, the block scale inverts
    (1/s -> s), and the translation entries follow the derived conversion
    law, which mixes (L-1)/2 and L/2 normalization factors.
    """
    if m.role != ROLE_AFFINE:
        raise RoleMismatch(f"expected role {ROLE_AFFINE!r}, got {m.role!r}")
    side = m.side if side is None else side
    if abs(np.linalg.det(m.block())) < 1e-12:
        raise SingularTransform("degenerate 2x2 block")
    theta, k = _similarity_parts(m)
    s = 1.0 / k
    c = (side - 1) / 2.0
    half = side / 2.0
    ct, st = math.cos(theta), math.sin(theta)
    t_ax, t_ay = m.m[0, 2], m.m[1, 2]
    t_cx = (-c * (ct + st) - half * (t_ay * ct + t_ax * st) + c) * s + c * (1.0 - s)
    t_cy = (-c * (ct - st) + half * (t_ay * st - t_ax * ct) + c) * s + c * (1.0 - s)
    out = np.eye(3)
    out[:2, :2] = _rot_block(theta, s)
    out[0, 2] = t_cx
    out[1, 2] = t_cy
    return Mat3(m=out, role=ROLE_COORD, side=side)


def coord_to_affine(m: Mat3, side: int | None = None) -> Mat3:
    """Exact inverse of :func:`affine_to_coord`."""
    if m.role != ROLE_COORD:
        raise RoleMismatch(f"expected role {ROLE_COORD!r}, got {m.role!r}")
    side = m.side if side is None else side
    if abs(np.linalg.det(m.block())) < 1e-12:
        raise SingularTransform("degenerate 2x2 block")
    theta, s = _similarity_parts(m)
    c = (side - 1) / 2.0
    ct, st = math.cos(theta), math.sin(theta)
    t_cx, t_cy = m.m[0, 2], m.m[1, 2]
    u = (t_cx - c * (1.0 - s)) / s
    v = (t_cy - c * (1.0 - s)) / s
    t_ax = (side - 1) / side * (ct + st - 1.0) - (2.0 / side) * (u * st + v * ct)
    t_ay = (side - 1) / side * (ct - st - 1.0) - (2.0 / side) * (u * ct - v * st)
    out = np.eye(3)
    out[:2, :2] = _rot_block(theta, 1.0 / s)
    out[0, 2] = t_ax
    out[1, 2] = t_ay
    return Mat3(m=out, role=ROLE_AFFINE, side=side)


def invert(m: Mat3) -> Mat3:
    """Invert a homogeneous matrix, keeping the bottom row exact."""
    b = m.block()
    det = b[0, 0] * b[1, 1] - b[0, 1] * b[1, 0]
    if abs(det) < 1e-12:
        raise SingularTransform("cannot invert matrix with degenerate block")
    binv = np.array([[b[1, 1], -b[0, 1]], [-b[1, 0], b[0, 0]]]) / det
    out = np.eye(3)
    out[:2, :2] = binv
    out[:2, 2] = -binv @ m.translation()
    return Mat3(m=out, role=m.role, side=m.side)


def compose_moving_to_fixed(m_moving: Mat3, m_fixed: Mat3) -> Mat3:
    """Matrix taking the moving plane onto the fixed plane: inv(moving) @ fixed.

    Both inputs must describe their plane relative to the same base image,
    share a role, and share a side.
    """
    if m_moving.role != m_fixed.role:
        raise RoleMismatch(f"role mismatch: {m_moving.role!r} vs {m_fixed.role!r}")
    if m_moving.side != m_fixed.side:
        raise RoleMismatch(f"side mismatch: {m_moving.side} vs {m_fixed.side}")
    prod = invert(m_moving).m @ m_fixed.m
    return Mat3(m=prod, role=m_moving.role, side=m_moving.side)


def decompose_params(m: Mat3) -> TransformParams:
    """Recover (theta, scale, dx, dy) such that the builder reproduces ``m``."""
    theta, k = _similarity_parts(m)
    half = m.side / 2.0
    if m.role == ROLE_AFFINE:
        scale = 1.0 / k
        dx = -m.m[0, 2] * half
        dy = -m.m[1, 2] * half
    else:
        scale = k
        t = invert(Mat3(m=_centered_rs(theta, scale, m.side), role=m.role, side=m.side)).m @ m.m
        dy, dx = t[0, 2], t[1, 2]
    return TransformParams(theta=theta, scale=scale, dx=dx, dy=dy, side=m.side)


def rescale_for_center_crop(m: Mat3, out_side: int) -> Mat3:
    """Re-express a resampling matrix after a centered crop to ``out_side``.

    Cropping the central ``out_side`` square of an ``L`` image scales
    normalized coordinates by ``L/out_side``, so the matrix is conjugated
    by that zoom.  Rigid blocks are unchanged; normalized translations
    grow by ``L/out_side``.
    """
    if m.role != ROLE_AFFINE:
        raise RoleMismatch("crop rescaling applies to resampling matrices")
    if out_side > m.side or (m.side - out_side) % 2 != 0:
        raise InvalidParam(f"cannot center-crop side {m.side} to {out_side}")
    f = out_side / m.side
    d = np.diag([f, f, 1.0])
    dinv = np.diag([1.0 / f, 1.0 / f, 1.0])
    return Mat3(m=dinv @ m.m @ d, role=ROLE_AFFINE, side=out_side)

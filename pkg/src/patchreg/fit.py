"""Weighted rigid (rotation + translation) estimation from correspondences.

The solver is the closed-form weighted 2-D orthogonal Procrustes fit with
the scale clamped to 1: rotation from the atan2 of the weighted
cross-covariance terms about the weighted centroids, translation from the
centroid residual.  It operates in pixel-flow space, i.e. on (row, col)
points, so the recovered matrix is a pixel-flow ("coord") matrix; its
resampling form follows from the conversion law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, NotEnoughMatches
from .matching import CorrespondenceSet
from .transforms import (
    ROLE_COORD,
    Mat3,
    TransformParams,
    build_coord,
    coord_to_affine,
    decompose_params,
)


@dataclass(frozen=True)
class RigidFit:
    """Result of a rigid fit: parameters, weighted RMS residual, point count."""

    params: TransformParams
    residual_rms: float
    n_used: int

    def to_json_dict(self) -> dict:
        d = self.params.to_json_dict()
        d.update({"residual_rms": self.residual_rms, "n_used": self.n_used})
        return d


def _solve(pm: np.ndarray, pf: np.ndarray, w: np.ndarray) -> tuple[float, np.ndarray, float]:
    wsum = w.sum()
    mu_m = (w[:, None] * pm).sum(axis=0) / wsum
    mu_f = (w[:, None] * pf).sum(axis=0) / wsum
    am = pm - mu_m
    af = pf - mu_f
    if float((w * (am * am).sum(axis=1)).sum()) <= 0.0:
        raise DegenerateGeometry("all moving points coincide")
    # block convention [[cos, sin], [-sin, cos]] on (row, col) points
    num = float((w * (af[:, 0] * am[:, 1] - af[:, 1] * am[:, 0])).sum())
    den = float((w * (af * am).sum(axis=1)).sum())
    theta = math.atan2(num, den)
    rot = np.array(
        [[math.cos(theta), math.sin(theta)], [-math.sin(theta), math.cos(theta)]]
    )
    t = mu_f - rot @ mu_m
    res = pm @ rot.T + t - pf
    rms = math.sqrt(float((w * (res * res).sum(axis=1)).sum() / wsum))
    return theta, t, rms


def fit_rigid(
    c: CorrespondenceSet,
    use_weights: bool = True,
    ransac: bool = False,
    ransac_iters: int = 200,
    ransac_tol: float = 3.0,
    rng: np.random.Generator | None = None,
) -> RigidFit:
    """Least-squares rigid fit minimizing sum w * |R p_m + t - p_f|^2.

    Confidence weights are used as-is (disable with use_weights=False);
    robustness is normally the job of the upstream filters, but a minimal
    RANSAC loop is available behind the off-by-default flag for ablation.
    """
    if c.n < 2:
        raise NotEnoughMatches(f"need >= 2 correspondences, got {c.n}")
    w = c.w if use_weights else np.ones(c.n)
    pm, pf = c.pm, c.pf

    if ransac and c.n > 2:
        rng = np.random.default_rng(0) if rng is None else rng
        best = None
        for _ in range(ransac_iters):
            idx = rng.choice(c.n, size=2, replace=False)
            if np.allclose(pm[idx[0]], pm[idx[1]]):
                continue
            theta, t, _ = _solve(pm[idx], pf[idx], w[idx])
            rot = np.array(
                [[math.cos(theta), math.sin(theta)], [-math.sin(theta), math.cos(theta)]]
            )
            err = np.linalg.norm(pm @ rot.T + t - pf, axis=1)
            inliers = err <= ransac_tol
            if best is None or inliers.sum() > best.sum():
                best = inliers
        if best is not None and best.sum() >= 2:
            pm, pf, w = pm[best], pf[best], w[best]

    theta, t, rms = _solve(pm, pf, w)
    coord = np.eye(3)
    coord[0, 0] = coord[1, 1] = math.cos(theta)
    coord[0, 1] = math.sin(theta)
    coord[1, 0] = -math.sin(theta)
    coord[:2, 2] = t
    params = decompose_params(Mat3(m=coord, role=ROLE_COORD, side=c.side))
    return RigidFit(params=params, residual_rms=rms, n_used=len(w))


def fit_to_matrices(f: RigidFit, side: int | None = None) -> tuple[Mat3, Mat3]:
    """Pixel-flow and resampling matrices of a fit.

    The fit lives in pixel-flow space; the resampling matrix follows via
    the conversion law.
    """
    params = f.params if side is None or side == f.params.side else TransformParams(
        theta=f.params.theta, scale=f.params.scale, dx=f.params.dx, dy=f.params.dy, side=side
    )
    coord = build_coord(params)
    return coord, coord_to_affine(coord)

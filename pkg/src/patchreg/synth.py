"""Synthetic pair generation and ground-truth matching maps.

A source image and its mask are warped twice with independently drawn
rigid parameters and center-cropped to half size, giving a moving/fixed
pair whose true relative transform is known exactly.  Grid patches of
the masks that carry enough foreground become matching candidates, and
the true pixel-flow matrix decides which candidate pairs correspond.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InvalidParam, OutOfSupport, SizeMismatch
from .raster import Raster, center_crop, load_raster, normalize, save_raster, warp_parametric
from .transforms import (
    Mat3,
    TransformParams,
    affine_to_coord,
    build_affine,
    compose_moving_to_fixed,
    decompose_params,
    rescale_for_center_crop,
)

LEVEL_COARSE = "coarse"
LEVEL_FINE = "fine"
LEVEL_SCORES = "scores"


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for pair synthesis and ground-truth map construction."""

    src_side: int = 512
    out_side: int = 256
    theta_range_deg: tuple[float, float] = (-45.0, 45.0)
    trans_range: float = 32.0  # +- pixels on both axes
    coarse_grid: int = 8
    fine_grid: int = 16
    coarse_thresh: float = 0.0
    fine_thresh: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.out_side * 2 != self.src_side:
            raise InvalidParam("out_side must be half of src_side")
        if self.out_side % self.coarse_grid != 0:
            raise InvalidParam("coarse_grid must divide out_side")
        if self.fine_grid != 2 * self.coarse_grid:
            raise InvalidParam("fine_grid must be twice coarse_grid")
        if self.theta_range_deg[0] > self.theta_range_deg[1]:
            raise InvalidParam("empty theta range")
        if self.trans_range < 0:
            raise InvalidParam("trans_range must be >= 0")

    def check_support(self) -> None:
        """Refuse ranges whose crop could sample outside the source.

        The farthest crop corner sits sqrt(2)*(out-1)/2 from the center;
        after rotation and a translation of up to sqrt(2)*trans_range the
        sampled source point must stay inside the source's inscribed
        circle of radius (src-1)/2.
        """
        swing = np.sqrt(2.0) * (self.out_side - 1) / 2.0
        reach = swing + np.sqrt(2.0) * self.trans_range
        if reach > (self.src_side - 1) / 2.0:
            raise OutOfSupport(
                f"translation range {self.trans_range} px plus crop swing {swing:.1f} px "
                f"exceeds source support {(self.src_side - 1) / 2.0:.1f} px"
            )

    def to_json_dict(self) -> dict:
        return {
            "src_side": self.src_side,
            "out_side": self.out_side,
            "theta_range_deg": list(self.theta_range_deg),
            "trans_range": self.trans_range,
            "coarse_grid": self.coarse_grid,
            "fine_grid": self.fine_grid,
            "coarse_thresh": self.coarse_thresh,
            "fine_thresh": self.fine_thresh,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "theta_range_deg" in d:
            d["theta_range_deg"] = tuple(d["theta_range_deg"])
        return cls(**d)


@dataclass(frozen=True)
class MatchMap:
    """Pairwise candidate map between moving and fixed grid patches.

    conf is (nm, nf) with nm == nf == grid**2; rows index moving cells,
    columns fixed cells, both flattened row-major.  aux1/aux2 carry
    cos/sin of the rotation difference at the coarse level and sub-cell
    coordinate refinements (row, col, in cell units) at the fine level.
    Level "scores" marks unnormalized logits instead of confidences.
    """

    conf: np.ndarray
    aux1: np.ndarray
    aux2: np.ndarray
    level: str
    grid: int
    side: int

    def __post_init__(self):
        conf = np.asarray(self.conf, dtype=float)
        aux1 = np.asarray(self.aux1, dtype=float)
        aux2 = np.asarray(self.aux2, dtype=float)
        n = self.grid * self.grid
        for name, arr in (("conf", conf), ("aux1", aux1), ("aux2", aux2)):
            if arr.shape != (n, n):
                raise SizeMismatch(f"{name} must be ({n}, {n}), got {arr.shape}")
            if not np.isfinite(arr).all():
                raise InvalidParam(f"{name} contains non-finite values")
        if self.level not in (LEVEL_COARSE, LEVEL_FINE, LEVEL_SCORES):
            raise InvalidParam(f"unknown map level {self.level!r}")
        if self.side % self.grid != 0:
            raise SizeMismatch(f"grid {self.grid} does not divide side {self.side}")
        for name, arr in (("conf", conf), ("aux1", aux1), ("aux2", aux2)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def nm(self) -> int:
        return self.conf.shape[0]

    @property
    def nf(self) -> int:
        return self.conf.shape[1]

    @property
    def cell_size(self) -> float:
        return self.side / self.grid


def save_matchmap(m: MatchMap, basepath: str | Path) -> None:
    """Write <base>.f32 as a [3][nm][nf] little-endian float32 tensor + sidecar."""
    base = Path(basepath)
    base.parent.mkdir(parents=True, exist_ok=True)
    tensor = np.stack([m.conf, m.aux1, m.aux2]).astype("<f4")
    tensor.tofile(base.with_suffix(".f32"))
    sidecar = {"level": m.level, "grid": m.grid, "side": m.side}
    base.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def load_matchmap(basepath: str | Path) -> MatchMap:
    base = Path(basepath)
    sidecar = json.loads(base.with_suffix(".json").read_text())
    n = int(sidecar["grid"]) ** 2
    tensor = np.fromfile(base.with_suffix(".f32"), dtype="<f4").astype(float)
    tensor = tensor.reshape(3, n, n)
    return MatchMap(
        conf=tensor[0],
        aux1=tensor[1],
        aux2=tensor[2],
        level=str(sidecar["level"]),
        grid=int(sidecar["grid"]),
        side=int(sidecar["side"]),
    )


@dataclass(frozen=True)
class SynthPair:
    """One synthetic registration case with full ground truth."""

    moving: Raster
    fixed: Raster
    mask_moving: Raster
    mask_fixed: Raster
    gt_affine: Mat3
    gt_params: TransformParams
    gt_coarse: MatchMap
    gt_fine: MatchMap
    draw_moving: TransformParams
    draw_fixed: TransformParams


def candidate_patches(mask: Raster, grid: int, thresh: float) -> np.ndarray:
    """Flattened indices of grid cells whose mask mean exceeds thresh."""
    side = mask.side
    if side % grid != 0:
        raise SizeMismatch(f"grid {grid} does not divide side {side}")
    cs = side // grid
    means = mask.data.reshape(grid, cs, grid, cs).mean(axis=(1, 3))
    return np.flatnonzero(means.ravel() > thresh)


def cell_centers(side: int, grid: int) -> np.ndarray:
    """(grid**2, 2) array of patch centroids in (row, col) pixel coordinates."""
    cs = side / grid
    axis = (np.arange(grid) + 0.5) * cs - 0.5
    rr, cc = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def _bin_cells(vals: np.ndarray, cs: float) -> tuple[np.ndarray, np.ndarray]:
    """Cell index and sub-cell offset in (-0.5, 0.5] for 1-D coordinates.

    Points exactly on a cell boundary are equidistant from two centroids;
    the smaller index wins, so the offset lands on +0.5.
    """
    u = (vals + 0.5) / cs
    j = np.floor(u).astype(int)
    tie = (u == j) & (j >= 1)
    j = np.where(tie, j - 1, j)
    return j, u - j - 0.5


def _gt_level_map(
    mask_moving: Raster,
    mask_fixed: Raster,
    coord: Mat3,
    theta: float,
    grid: int,
    thresh: float,
    level: str,
) -> MatchMap:
    side = mask_moving.side
    n = grid * grid
    cand_m = candidate_patches(mask_moving, grid, thresh)
    cand_f = set(candidate_patches(mask_fixed, grid, thresh).tolist())
    conf = np.zeros((n, n))
    aux1 = np.zeros((n, n))
    aux2 = np.zeros((n, n))
    if cand_m.size:
        cs = side / grid
        mapped = coord.apply(cell_centers(side, grid)[cand_m])
        jr, off_r = _bin_cells(mapped[:, 0], cs)
        jc, off_c = _bin_cells(mapped[:, 1], cs)
        inside = (jr >= 0) & (jr < grid) & (jc >= 0) & (jc < grid)
        for idx in np.flatnonzero(inside):
            i = int(cand_m[idx])
            j = int(jr[idx] * grid + jc[idx])
            if j not in cand_f:
                continue
            conf[i, j] = 1.0
            if level == LEVEL_COARSE:
                aux1[i, j] = np.cos(theta)
                aux2[i, j] = np.sin(theta)
            else:
                aux1[i, j] = off_r[idx]
                aux2[i, j] = off_c[idx]
    return MatchMap(conf=conf, aux1=aux1, aux2=aux2, level=level, grid=grid, side=side)


def build_gt_maps(
    mask_moving: Raster, mask_fixed: Raster, gt_affine: Mat3, cfg: SynthConfig
) -> tuple[MatchMap, MatchMap]:
    """Ground-truth coarse and fine maps from the true transform.

    A pair is positive when the moving patch centroid, pushed through the
    pixel-flow form of the true transform, lands inside the fixed patch,
    and both patches are candidates.  Coarse positives carry cos/sin of
    the true rotation difference; fine positives carry the sub-cell
    offset of the landed point relative to the fixed patch centroid.
    """
    coord = affine_to_coord(gt_affine)
    theta = decompose_params(gt_affine).theta
    gt_coarse = _gt_level_map(
        mask_moving, mask_fixed, coord, theta, cfg.coarse_grid, cfg.coarse_thresh, LEVEL_COARSE
    )
    gt_fine = _gt_level_map(
        mask_moving, mask_fixed, coord, theta, cfg.fine_grid, cfg.fine_thresh, LEVEL_FINE
    )
    return gt_coarse, gt_fine


def coarse_gt_for_params(
    p: TransformParams,
    grid: int = 8,
    thresh: float = 0.0,
    mask_moving: Raster | None = None,
    mask_fixed: Raster | None = None,
) -> MatchMap:
    """Coarse ground-truth map for a known moving->fixed transform.

    Masks default to all-ones (every patch is a candidate); the transform
    parameters live on the output-image side length.
    """
    side = p.side
    ones = Raster(np.ones((side, side)), value_range=(0.0, 1.0))
    mask_moving = ones if mask_moving is None else mask_moving
    mask_fixed = ones if mask_fixed is None else mask_fixed
    coord = affine_to_coord(build_affine(p))
    return _gt_level_map(mask_moving, mask_fixed, coord, p.theta, grid, thresh, LEVEL_COARSE)


def synth_pair(
    bright: Raster, mask: Raster, cfg: SynthConfig, rng: np.random.Generator
) -> SynthPair:
    """Draw two rigid transforms, warp + crop, and build ground truth."""
    if bright.side != cfg.src_side or mask.side != cfg.src_side:
        raise SizeMismatch(
            f"source rasters must be {cfg.src_side}^2, got {bright.data.shape} / {mask.data.shape}"
        )
    cfg.check_support()

    def draw() -> TransformParams:
        theta = np.radians(rng.uniform(*cfg.theta_range_deg))
        tx = rng.uniform(-cfg.trans_range, cfg.trans_range)
        ty = rng.uniform(-cfg.trans_range, cfg.trans_range)
        return TransformParams(theta=theta, scale=1.0, dx=tx, dy=ty, side=cfg.src_side)

    draw_moving = draw()
    draw_fixed = draw()

    def make(p: TransformParams) -> tuple[Raster, Raster]:
        img = center_crop(warp_parametric(bright, p, interp="bilinear", fill=0.0), cfg.out_side)
        msk = center_crop(warp_parametric(mask, p, interp="nearest", fill=0.0), cfg.out_side)
        return img, msk

    moving, mask_moving = make(draw_moving)
    fixed, mask_fixed = make(draw_fixed)

    gt_src = compose_moving_to_fixed(build_affine(draw_moving), build_affine(draw_fixed))
    gt_affine = rescale_for_center_crop(gt_src, cfg.out_side)
    gt_params = decompose_params(gt_affine)
    gt_coarse, gt_fine = build_gt_maps(mask_moving, mask_fixed, gt_affine, cfg)
    return SynthPair(
        moving=moving,
        fixed=fixed,
        mask_moving=mask_moving,
        mask_fixed=mask_fixed,
        gt_affine=gt_affine,
        gt_params=gt_params,
        gt_coarse=gt_coarse,
        gt_fine=gt_fine,
        draw_moving=draw_moving,
        draw_fixed=draw_fixed,
    )


# ---------------------------------------------------------------------------
# Case bundles on disk
# ---------------------------------------------------------------------------


def save_pair(pair: SynthPair, case_dir: str | Path) -> None:
    d = Path(case_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_raster(pair.moving, d / "moving")
    save_raster(pair.fixed, d / "fixed")
    save_raster(pair.mask_moving, d / "mask_moving")
    save_raster(pair.mask_fixed, d / "mask_fixed")
    save_matchmap(pair.gt_coarse, d / "gt_coarse")
    save_matchmap(pair.gt_fine, d / "gt_fine")
    (d / "gt_affine.json").write_text(pair.gt_affine.to_json() + "\n")
    params = {
        "delta": pair.gt_params.to_json_dict(),
        "moving": pair.draw_moving.to_json_dict(),
        "fixed": pair.draw_fixed.to_json_dict(),
    }
    (d / "gt_params.json").write_text(json.dumps(params, sort_keys=True) + "\n")


def load_pair(case_dir: str | Path) -> SynthPair:
    d = Path(case_dir)
    params = json.loads((d / "gt_params.json").read_text())
    return SynthPair(
        moving=load_raster(d / "moving"),
        fixed=load_raster(d / "fixed"),
        mask_moving=load_raster(d / "mask_moving"),
        mask_fixed=load_raster(d / "mask_fixed"),
        gt_affine=Mat3.from_json((d / "gt_affine.json").read_text()),
        gt_params=TransformParams.from_json_dict(params["delta"]),
        gt_coarse=load_matchmap(d / "gt_coarse"),
        gt_fine=load_matchmap(d / "gt_fine"),
        draw_moving=TransformParams.from_json_dict(params["moving"]),
        draw_fixed=TransformParams.from_json_dict(params["fixed"]),
    )


# ---------------------------------------------------------------------------
# Self-contained demo sources (textured image + blob mask) for tests and the
# CLI demo path; real pipelines load their own rasters instead.
# ---------------------------------------------------------------------------


def _smooth_noise(side: int, rng: np.random.Generator, passes: int = 3, box: int = 9) -> np.ndarray:
    field = rng.standard_normal((side, side))
    kernel = np.ones(box) / box
    for _ in range(passes):
        field = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, field)
        field = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="same"), 0, field)
    return field


def demo_source(
    side: int, rng: np.random.Generator, mask_coverage: float = 0.45
) -> tuple[Raster, Raster]:
    """Deterministic textured source and binary blob mask for demos/tests."""
    texture = _smooth_noise(side, rng, passes=2, box=7)
    blobs = _smooth_noise(side, rng, passes=4, box=max(9, side // 24))
    cut = np.quantile(blobs, 1.0 - mask_coverage)
    mask = (blobs > cut).astype(float)
    img = Raster(texture * (0.5 + mask))
    return normalize(img, 0.5, 99.5), Raster(mask, value_range=(0.0, 1.0))


def replace_seed(cfg: SynthConfig, seed: int) -> SynthConfig:
    return replace(cfg, seed=seed)

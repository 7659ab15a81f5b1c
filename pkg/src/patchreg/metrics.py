"""Training losses on matching maps and registration evaluation metrics."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyBatch, InvalidParam, RoleMismatch, SizeMismatch
from .matching import expand_coarse_filter
from .synth import MatchMap
from .transforms import ROLE_AFFINE, Mat3, affine_to_coord

_LOG_CLAMP = 1.0 - 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Per-hierarchy loss weights.

    lambda1/lambda2 weight the enhanced and plain negative confidence
    terms; alpha weights the angle term (coarse), beta the refinement
    term (fine).
    """

    lambda1: float
    lambda2: float
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.alpha, self.beta) < 0:
            raise InvalidParam("loss weights must be >= 0")


# Default weights used for all loss computations.
COARSE_WEIGHTS = LossWeights(lambda1=500.0, lambda2=100.0, alpha=20.0)
FINE_WEIGHTS = LossWeights(lambda1=50.0, lambda2=10.0, beta=20.0)


def conf_loss_terms(
    pred_conf: np.ndarray, gt_conf: np.ndarray, enhance: np.ndarray
) -> tuple[float, float, float]:
    """Confidence loss split into (pos, neg1, neg2).

    pos averages -log(1 + d) - log(1 - d) with d = pred - gt over
    ground-truth positives (zero when the difference vanishes); neg1 is
    the mean of -log(1 - pred) over enhanced negatives, neg2 over the
    remaining negatives.  |d| and pred are clamped just below 1 so the
    logs stay finite at saturation.
    """
    pred = np.asarray(pred_conf, dtype=float)
    gt = np.asarray(gt_conf, dtype=float)
    enhance = np.asarray(enhance, dtype=bool)
    if pred.shape != gt.shape or pred.shape != enhance.shape:
        raise SizeMismatch("loss inputs differ in shape")
    positives = gt > 0
    d = np.clip(pred - gt, -_LOG_CLAMP, _LOG_CLAMP)
    if positives.any():
        dp = d[positives]
        pos = float(np.mean(-np.log1p(dp) - np.log1p(-dp)))
    else:
        warnings.warn("confidence loss with no ground-truth positives; pos term is 0")
        pos = 0.0
    neg_pred = np.minimum(pred, _LOG_CLAMP)
    neg1_mask = enhance & ~positives
    neg2_mask = ~enhance & ~positives
    neg1 = float(np.mean(-np.log1p(-neg_pred[neg1_mask]))) if neg1_mask.any() else 0.0
    neg2 = float(np.mean(-np.log1p(-neg_pred[neg2_mask]))) if neg2_mask.any() else 0.0
    return pos, neg1, neg2


def aux_mse(
    pred: MatchMap, gt: MatchMap, positives: np.ndarray | None = None
) -> float:
    """Mean squared error of the two auxiliary channels on GT positives."""
    mask = gt.conf > 0 if positives is None else np.asarray(positives, dtype=bool)
    if not mask.any():
        return 0.0
    d1 = pred.aux1[mask] - gt.aux1[mask]
    d2 = pred.aux2[mask] - gt.aux2[mask]
    return float(np.mean((d1 * d1 + d2 * d2) / 2.0))


def enhance_masks(
    gt_coarse: MatchMap,
    gt_fine: MatchMap,
    cand_moving: np.ndarray,
    cand_fixed: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighting masks for the negative loss terms.

    Coarse: candidate pairs (both patches are candidates) that lack a
    correspondence.  Fine: children of coarse positives that are not
    fine positives.
    """
    n = gt_coarse.nm
    coarse = np.zeros((n, n), dtype=bool)
    coarse[np.ix_(np.asarray(cand_moving, dtype=int), np.asarray(cand_fixed, dtype=int))] = True
    coarse &= ~(gt_coarse.conf > 0)
    fine = expand_coarse_filter(gt_coarse.conf > 0) & ~(gt_fine.conf > 0)
    return coarse, fine


def total_loss(
    pred_coarse: MatchMap,
    gt_coarse: MatchMap,
    enhance_coarse: np.ndarray,
    pred_fine: MatchMap,
    gt_fine: MatchMap,
    enhance_fine: np.ndarray,
    coarse_w: LossWeights = COARSE_WEIGHTS,
    fine_w: LossWeights = FINE_WEIGHTS,
) -> dict:
    """Full loss: per-hierarchy weighted confidence terms plus the angle
    term on coarse positives and the refinement term on fine positives.
    Returns all components and their sum."""
    cpos, cneg1, cneg2 = conf_loss_terms(pred_coarse.conf, gt_coarse.conf, enhance_coarse)
    fpos, fneg1, fneg2 = conf_loss_terms(pred_fine.conf, gt_fine.conf, enhance_fine)
    angle = aux_mse(pred_coarse, gt_coarse)
    trans = aux_mse(pred_fine, gt_fine)
    coarse_conf = cpos + coarse_w.lambda1 * cneg1 + coarse_w.lambda2 * cneg2
    fine_conf = fpos + fine_w.lambda1 * fneg1 + fine_w.lambda2 * fneg2
    total = coarse_conf + coarse_w.alpha * angle + fine_conf + fine_w.beta * trans
    return {
        "total": total,
        "coarse_conf": coarse_conf,
        "coarse_pos": cpos,
        "coarse_neg1": cneg1,
        "coarse_neg2": cneg2,
        "angle": angle,
        "fine_conf": fine_conf,
        "fine_pos": fpos,
        "fine_neg1": fneg1,
        "fine_neg2": fneg2,
        "trans": trans,
    }


def corner_displacement(gt: Mat3, pred: Mat3, side: int | None = None) -> float:
    """Mean Euclidean displacement of the four image corners.

    Both matrices are taken to their pixel-flow form and applied to the
    corner pixels (0,0), (0,L-1), (L-1,0), (L-1,L-1).
    """
    if gt.role != pred.role:
        raise RoleMismatch(f"role mismatch: {gt.role!r} vs {pred.role!r}")
    side = gt.side if side is None else side
    if gt.role == ROLE_AFFINE:
        gt = affine_to_coord(gt, side)
        pred = affine_to_coord(pred, side)
    corners = np.array(
        [[0.0, 0.0], [0.0, side - 1.0], [side - 1.0, 0.0], [side - 1.0, side - 1.0]]
    )
    d = gt.apply(corners) - pred.apply(corners)
    return float(np.linalg.norm(d, axis=1).mean())


def angle_error_deg(theta_gt: float, theta_pred: float) -> float:
    """Absolute angular difference in degrees, wrapped to [0, 180]."""
    d = math.degrees(theta_pred - theta_gt)
    d = (d + 180.0) % 360.0 - 180.0
    return abs(d)


@dataclass(frozen=True)
class EvalRecord:
    """Per-case evaluation outcome."""

    case_id: str
    theta_gt_deg: float
    theta_err_deg: float
    corner_px: float
    corner_pct: float
    n_matches: int
    bucket: str = ""

    @property
    def success_1pct(self) -> bool:
        return self.corner_pct < 1.0

    @property
    def success_5pct(self) -> bool:
        return self.corner_pct < 5.0


CSV_COLUMNS = [
    "case_id",
    "theta_gt_deg",
    "theta_err_deg",
    "corner_px",
    "corner_pct",
    "n_matches",
    "bucket",
]


def write_records_csv(records: list[EvalRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.case_id,
                    repr(r.theta_gt_deg),
                    repr(r.theta_err_deg),
                    repr(r.corner_px),
                    repr(r.corner_pct),
                    r.n_matches,
                    r.bucket,
                ]
            )


def read_records_csv(path: str | Path) -> list[EvalRecord]:
    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not set(CSV_COLUMNS[:6]) <= set(reader.fieldnames):
            raise InvalidParam(f"malformed records CSV: columns {reader.fieldnames}")
        for row in reader:
            records.append(
                EvalRecord(
                    case_id=row["case_id"],
                    theta_gt_deg=float(row["theta_gt_deg"]),
                    theta_err_deg=float(row["theta_err_deg"]),
                    corner_px=float(row["corner_px"]),
                    corner_pct=float(row["corner_pct"]),
                    n_matches=int(row["n_matches"]),
                    bucket=row.get("bucket", ""),
                )
            )
    return records


def success_ratios(
    records: list[EvalRecord],
    side: int,
    step_pct: float = 0.25,
    max_pct: float = 10.0,
) -> dict:
    """Success fractions below 1% and 5% of the side, plus the full
    threshold -> rate curve sampled at step_pct steps."""
    if not records:
        raise EmptyBatch("no records")
    errs = np.array([r.corner_px for r in records], dtype=float)
    n = len(errs)
    curve = []
    steps = int(round(max_pct / step_pct))
    for k in range(steps + 1):
        thr_pct = k * step_pct
        rate = float((errs < thr_pct / 100.0 * side).sum()) / n
        curve.append((thr_pct, rate))
    return {
        "n": n,
        "pct_under_1": float((errs < 0.01 * side).sum()) / n,
        "pct_under_5": float((errs < 0.05 * side).sum()) / n,
        "curve": curve,
    }


def bucket_label(lo: float, hi: float) -> str:
    return f"({lo:g},{hi:g}]"


def assign_bucket(theta_gt_deg: float, edges: list[float]) -> str:
    """Bucket by absolute rotation into half-open intervals (lo, hi]."""
    a = abs(theta_gt_deg)
    for lo, hi in zip(edges[:-1], edges[1:]):
        if lo < a <= hi or (lo == edges[0] and a == lo):
            return bucket_label(lo, hi)
    return ""


def bucket_by_rotation(
    records: list[EvalRecord], edges: list[float], side: int
) -> list[dict]:
    """Group records by absolute ground-truth rotation and summarize each group."""
    if sorted(edges) != list(edges) or len(set(edges)) != len(edges):
        raise InvalidParam("bucket edges must be strictly increasing")
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        label = bucket_label(lo, hi)
        grp = [r for r in records if assign_bucket(r.theta_gt_deg, edges) == label]
        if not grp:
            out.append(
                {
                    "bucket": label,
                    "n": 0,
                    "mean_angle_err_deg": None,
                    "mean_corner_px": None,
                    "pct_under_1": None,
                    "pct_under_5": None,
                }
            )
            continue
        finite = [r for r in grp if math.isfinite(r.corner_px)]
        ratios = success_ratios(grp, side)
        out.append(
            {
                "bucket": label,
                "n": len(grp),
                "mean_angle_err_deg": (
                    float(np.mean([r.theta_err_deg for r in finite])) if finite else None
                ),
                "mean_corner_px": (
                    float(np.mean([r.corner_px for r in finite])) if finite else None
                ),
                "pct_under_1": ratios["pct_under_1"],
                "pct_under_5": ratios["pct_under_5"],
            }
        )
    return out

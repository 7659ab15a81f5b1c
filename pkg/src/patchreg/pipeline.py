"""End-to-end registration of one case from raw score maps.

Order of operations: normalize (dual-softmax at the coarse level,
Sinkhorn at the fine level), threshold, screen coarse matches by the
robust z-score of their detected angles, expand survivors into a fine
filter, extract weighted correspondences, and fit the rigid transform.
Detected angles only ever gate matches; they never enter the matrix fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NoMatches
from .fit import RigidFit, fit_rigid, fit_to_matrices
from .matching import (
    CorrespondenceSet,
    dual_softmax,
    expand_coarse_filter,
    extract_correspondences,
    sinkhorn,
    threshold_select,
    zscore_angle_filter,
)
from .metrics import EvalRecord, angle_error_deg, corner_displacement
from .synth import LEVEL_COARSE, LEVEL_FINE, MatchMap, SynthPair
from .transforms import Mat3, decompose_params


@dataclass(frozen=True)
class PipelineConfig:
    """Thresholds and normalizer settings for the registration pipeline."""

    coarse_tau: float = 0.15
    fine_tau: float = 0.25
    z_k: float = 3.5
    z_mode: str = "median"
    threshold_on_scores: bool = False  # select on raw logits instead of confidences
    score_tau: float = 1.5
    ds_temperature: float = 1.0
    sk_iters: int = 100
    sk_epsilon: float = 1.0
    use_weights: bool = True
    use_ransac: bool = False

    def to_json_dict(self) -> dict:
        return {
            "coarse_tau": self.coarse_tau,
            "fine_tau": self.fine_tau,
            "z_k": self.z_k,
            "z_mode": self.z_mode,
            "threshold_on_scores": self.threshold_on_scores,
            "score_tau": self.score_tau,
            "ds_temperature": self.ds_temperature,
            "sk_iters": self.sk_iters,
            "sk_epsilon": self.sk_epsilon,
            "use_weights": self.use_weights,
            "use_ransac": self.use_ransac,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**d)


@dataclass
class CaseResult:
    """Everything produced while registering one case."""

    fit: RigidFit | None
    coord: Mat3 | None
    affine: Mat3 | None
    correspondences: CorrespondenceSet | None
    conf_coarse: np.ndarray
    conf_fine: np.ndarray
    coarse_selected: np.ndarray
    coarse_kept: np.ndarray
    angles: np.ndarray
    failure: str | None = None
    extras: dict = field(default_factory=dict)


def register_case(
    scores_coarse: MatchMap, scores_fine: MatchMap, cfg: PipelineConfig
) -> CaseResult:
    """Run the full match-filter-fit chain on one case's score maps.

    Raises NoMatches when fewer than two correspondences survive; callers
    doing batch work should catch it and record the case as a failure.
    """
    conf_c = dual_softmax(scores_coarse.conf, temperature=cfg.ds_temperature)
    conf_f = sinkhorn(scores_fine.conf, iters=cfg.sk_iters, epsilon=cfg.sk_epsilon)

    coarse_map = MatchMap(
        conf=np.clip(conf_c, 0.0, 1.0),
        aux1=scores_coarse.aux1,
        aux2=scores_coarse.aux2,
        level=LEVEL_COARSE,
        grid=scores_coarse.grid,
        side=scores_coarse.side,
    )
    fine_map = MatchMap(
        conf=np.clip(conf_f, 0.0, 1.0),
        aux1=scores_fine.aux1,
        aux2=scores_fine.aux2,
        level=LEVEL_FINE,
        grid=scores_fine.grid,
        side=scores_fine.side,
    )

    if cfg.threshold_on_scores:
        sel_c = scores_coarse.conf > cfg.score_tau
        sel_f_base = scores_fine.conf > cfg.score_tau
    else:
        sel_c = threshold_select(coarse_map, cfg.coarse_tau)
        sel_f_base = None  # fine selection happens inside extraction

    us, vs = np.nonzero(sel_c)
    keep, angles = zscore_angle_filter(
        coarse_map.aux1[us, vs], coarse_map.aux2[us, vs], k=cfg.z_k, mode=cfg.z_mode
    )
    kept = np.zeros_like(sel_c)
    kept[us[keep], vs[keep]] = True

    filt = expand_coarse_filter(kept)
    if cfg.threshold_on_scores:
        corr = extract_correspondences(fine_map, filt & sel_f_base, tau=0.0)
    else:
        corr = extract_correspondences(fine_map, filt, tau=cfg.fine_tau)

    result = CaseResult(
        fit=None,
        coord=None,
        affine=None,
        correspondences=corr,
        conf_coarse=conf_c,
        conf_fine=conf_f,
        coarse_selected=sel_c,
        coarse_kept=kept,
        angles=angles,
    )
    if corr.n < 2:
        raise NoMatches(f"only {corr.n} correspondences survived filtering")
    result.fit = fit_rigid(corr, use_weights=cfg.use_weights, ransac=cfg.use_ransac)
    result.coord, result.affine = fit_to_matrices(result.fit)
    return result


def evaluate_case(
    case_id: str,
    pair: SynthPair,
    result: CaseResult | None,
    bucket: str = "",
) -> EvalRecord:
    """Score one case against its ground truth.

    Failed cases (no usable matches) get an infinite corner error so they
    count against every success threshold.
    """
    side = pair.gt_affine.side
    theta_gt = pair.gt_params.theta_deg
    if result is None or result.affine is None:
        return EvalRecord(
            case_id=case_id,
            theta_gt_deg=theta_gt,
            theta_err_deg=float("inf"),
            corner_px=float("inf"),
            corner_pct=float("inf"),
            n_matches=0 if result is None or result.correspondences is None else result.correspondences.n,
            bucket=bucket,
        )
    corner = corner_displacement(pair.gt_affine, result.affine, side)
    theta_pred = decompose_params(result.affine).theta
    return EvalRecord(
        case_id=case_id,
        theta_gt_deg=theta_gt,
        theta_err_deg=angle_error_deg(math.radians(theta_gt), theta_pred),
        corner_px=corner,
        corner_pct=corner / side * 100.0,
        n_matches=result.correspondences.n,
        bucket=bucket,
    )

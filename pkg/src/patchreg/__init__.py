"""patchreg: grid-patch feature matching and rigid image registration.

The package covers the deterministic half of a coarse-to-fine matching
registration system: homogeneous transform algebra with the conversion
laws between resampling and pixel-flow matrices, raster warping, synthetic
pair generation with ground-truth matching maps, confidence-map
normalization (dual-softmax / Sinkhorn), hierarchical match filtration,
closed-form rigid fitting, loss computation, and evaluation metrics.
"""

from .errors import (
    DegenerateGeometry,
    EmptyBatch,
    InvalidParam,
    InvalidThreshold,
    NoMatches,
    NotEnoughMatches,
    NotSimilarity,
    OutOfSupport,
    PatchRegError,
    RoleMismatch,
    SingularTransform,
    SizeMismatch,
)
from .fit import RigidFit, fit_rigid, fit_to_matrices
from .matching import (
    Corruption,
    CorrespondenceSet,
    analyze_normalizers,
    appendix_experiment,
    dual_softmax,
    expand_coarse_filter,
    extract_correspondences,
    match_groups,
    mock_matcher,
    simulate_scores,
    sinkhorn,
    threshold_select,
    zscore_angle_filter,
)
from .metrics import (
    COARSE_WEIGHTS,
    FINE_WEIGHTS,
    EvalRecord,
    LossWeights,
    angle_error_deg,
    bucket_by_rotation,
    conf_loss_terms,
    corner_displacement,
    enhance_masks,
    read_records_csv,
    success_ratios,
    total_loss,
    write_records_csv,
)
from .pipeline import CaseResult, PipelineConfig, evaluate_case, register_case
from .raster import (
    Raster,
    center_crop,
    channel_mean,
    load_raster,
    normalize,
    read_pgm,
    save_raster,
    warp_by_affine,
    warp_parametric,
    write_pgm,
)
from .synth import (
    MatchMap,
    SynthConfig,
    SynthPair,
    build_gt_maps,
    candidate_patches,
    cell_centers,
    coarse_gt_for_params,
    demo_source,
    load_matchmap,
    load_pair,
    save_matchmap,
    save_pair,
    synth_pair,
)
from .transforms import (
    ROLE_AFFINE,
    ROLE_COORD,
    Mat3,
    TransformParams,
    affine_to_coord,
    build_affine,
    build_coord,
    compose_moving_to_fixed,
    coord_to_affine,
    decompose_params,
    invert,
    rescale_for_center_crop,
)

__version__ = "0.1.0"

"""Confidence-map normalization, match filtration, and correspondence extraction.

Two normalizers turn raw pairwise scores into confidences: a dual-softmax
operator (product of row-wise and column-wise softmax), which keeps a
usable signal when one patch legitimately corresponds to several, and a
log-domain Sinkhorn iteration, which drives the map toward a doubly
stochastic assignment and so suppresses duplicated matches.  Downstream,
coarse matches are screened by a robust z-score test on their detected
rotation angles, surviving coarse pairs gate the fine map, and fine
survivors become weighted point correspondences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParam, InvalidThreshold, SizeMismatch
from .synth import LEVEL_SCORES, MatchMap


def dual_softmax(scores: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Elementwise product of row-softmax and column-softmax of the scores."""
    s = np.asarray(scores, dtype=float) / temperature
    if not np.isfinite(s).all():
        raise InvalidParam("scores contain non-finite values")
    row = np.exp(s - s.max(axis=1, keepdims=True))
    row /= row.sum(axis=1, keepdims=True)
    col = np.exp(s - s.max(axis=0, keepdims=True))
    col /= col.sum(axis=0, keepdims=True)
    return row * col


def sinkhorn(scores: np.ndarray, iters: int = 100, epsilon: float = 1.0) -> np.ndarray:
    """Log-domain Sinkhorn normalization toward a doubly stochastic map.

    Alternates row and column log-sum-exp normalizations for a fixed
    number of iterations (deterministic output, no slack bins).  On a
    square map both marginals approach 1.  A non-square (nm, nf) map
    cannot be doubly stochastic; rows are normalized to sum 1 and columns
    to sum nm/nf so that total mass is conserved.
    """
    s = np.asarray(scores, dtype=float)
    if not np.isfinite(s).all():
        raise InvalidParam("scores contain non-finite values")
    if iters < 1:
        raise InvalidParam("iters must be >= 1")
    la = s / epsilon
    nm, nf = la.shape
    col_target = np.log(nm / nf)
    for _ in range(iters):
        la -= _logsumexp(la, axis=1)
        la -= _logsumexp(la, axis=0) - col_target
    return np.exp(la)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))


def threshold_select(m: MatchMap, tau: float) -> np.ndarray:
    """Boolean map of confidences strictly above tau."""
    if not 0.0 <= tau < 1.0:
        raise InvalidThreshold(f"threshold must be in [0, 1), got {tau}")
    return m.conf > tau


MIN_ANGLE_SPREAD = np.radians(0.5)


def zscore_angle_filter(
    cos_vals: np.ndarray,
    sin_vals: np.ndarray,
    k: float = 3.5,
    mode: str = "median",
    min_spread: float = MIN_ANGLE_SPREAD,
) -> tuple[np.ndarray, np.ndarray]:
    """Flag angle outliers among selected coarse matches.

    Angles are recovered with atan2, unwrapped into a single 2*pi window
    around the batch median so that wrap-around near +-180 degrees cannot
    split a tight cluster, and scored with a robust z (|a - median| /
    (1.4826 * MAD)) or, in "mean" mode, a classic z against mean/std.
    Pixels with z > k are dropped.  Fewer than 3 inputs pass through
    untouched.  The spread estimate is floored at min_spread (half a
    degree by default): nearly identical detections must never knock each
    other out, and when the batch is exactly constant the floor alone
    decides, dropping anything beyond k * min_spread of the median.

    Returns (keep, angles): a boolean mask and the unwrapped angle per pixel.
    """
    cos_vals = np.asarray(cos_vals, dtype=float)
    sin_vals = np.asarray(sin_vals, dtype=float)
    if cos_vals.shape != sin_vals.shape:
        raise SizeMismatch("cos/sin arrays differ in shape")
    raw = np.arctan2(sin_vals, cos_vals)
    n = raw.size
    if n == 0:
        return np.zeros(0, dtype=bool), raw
    ref = float(np.arctan2(np.median(sin_vals), np.median(cos_vals)))
    angles = ref + _wrap_pi(raw - ref)
    if n < 3:
        return np.ones(n, dtype=bool), angles
    center = float(np.median(angles))
    angles = center + _wrap_pi(angles - center)
    dev = angles - np.median(angles)
    if mode == "median":
        scale = max(1.4826 * float(np.median(np.abs(dev))), min_spread)
        z = np.abs(dev) / scale
    elif mode == "mean":
        scale = max(float(np.std(dev)), min_spread)
        z = np.abs(dev - dev.mean()) / scale
    else:
        raise InvalidParam(f"unknown z-score mode {mode!r}")
    return z <= k, angles


def _wrap_pi(a: np.ndarray) -> np.ndarray:
    """Wrap into (-pi, pi]."""
    return -(np.mod(-np.asarray(a) + np.pi, 2.0 * np.pi) - np.pi)


def expand_coarse_filter(coarse_pass: np.ndarray) -> np.ndarray:
    """Expand a (g^2, g^2) coarse pass map to the (4g^2, 4g^2) fine pair mask.

    Each coarse cell covers a 2x2 block of fine cells on its own image,
    so one passing coarse pair switches on the 4x4 block of fine pairs
    formed by its children on both sides.
    """
    coarse_pass = np.asarray(coarse_pass, dtype=bool)
    n = coarse_pass.shape[0]
    g = int(round(np.sqrt(n)))
    if coarse_pass.shape != (n, n) or g * g != n:
        raise SizeMismatch(f"expected (g^2, g^2) map, got {coarse_pass.shape}")
    fg = 2 * g
    grid = coarse_pass.reshape(g, g, g, g)
    fine = np.zeros((fg, fg, fg, fg), dtype=bool)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                for d in range(2):
                    fine[a::2, b::2, c::2, d::2] = grid
    return fine.reshape(fg * fg, fg * fg)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Weighted point pairs between the moving and fixed planes.

    pm/pf are (n, 2) arrays of (row, col) pixel coordinates; moving
    points sit on the fine-cell centroid lattice, fixed points carry the
    sub-cell refinement.  w holds the match confidences.
    """

    pm: np.ndarray
    pf: np.ndarray
    w: np.ndarray
    side: int

    def __post_init__(self):
        pm = np.asarray(self.pm, dtype=float).reshape(-1, 2)
        pf = np.asarray(self.pf, dtype=float).reshape(-1, 2)
        w = np.asarray(self.w, dtype=float).reshape(-1)
        if len(pm) != len(pf) or len(pm) != len(w):
            raise SizeMismatch("pm/pf/w lengths differ")
        if np.any(w <= 0):
            raise InvalidParam("weights must be positive")
        for name, arr in (("pm", pm), ("pf", pf), ("w", w)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return len(self.w)


def extract_correspondences(
    fine: MatchMap, filt: np.ndarray, tau: float
) -> CorrespondenceSet:
    """Turn surviving fine pairs into weighted point correspondences.

    For a surviving pair (u, v): the moving point is the centroid of fine
    cell u, the fixed point is the centroid of fine cell v displaced by
    the refinement channels (in cell units), and the weight is the
    confidence.  An empty result is legal.
    """
    filt = np.asarray(filt, dtype=bool)
    if filt.shape != fine.conf.shape:
        raise SizeMismatch(f"filter shape {filt.shape} != map shape {fine.conf.shape}")
    selected = threshold_select(fine, tau) & filt
    us, vs = np.nonzero(selected)
    from .synth import cell_centers

    centers = cell_centers(fine.side, fine.grid)
    cs = fine.cell_size
    pm = centers[us]
    pf = centers[vs] + np.stack([fine.aux1[us, vs], fine.aux2[us, vs]], axis=1) * cs
    w = fine.conf[us, vs]
    return CorrespondenceSet(pm=pm, pf=pf, w=w, side=fine.side)


@dataclass(frozen=True)
class Corruption:
    """Knobs of the mock matcher standing in for a trained network.

    drop_rate: probability of losing a true positive (applied
        independently at each level).
    spurious_rate: spurious coarse pairs as a fraction of the true count;
        each brings one spurious fine child inside its 4x4 block.
    jitter_sigma: Gaussian sigma on the auxiliary channels (radians for
        angles, cell units for refinements).
    score_margin: how far positive logits sit above the noise floor.
    score_noise: sigma of the Gaussian logit floor (0 = clean logits,
        giving exact zero-noise recovery downstream).
    spurious_angle_offset: angle error of spurious matches, radians,
        relative to the true rotation; None draws uniform random angles.
    """

    drop_rate: float = 0.0
    spurious_rate: float = 0.0
    jitter_sigma: float = 0.0
    score_margin: float = 10.0
    score_noise: float = 1.0
    spurious_angle_offset: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.drop_rate <= 1.0:
            raise InvalidParam(f"drop_rate must be in [0, 1], got {self.drop_rate}")
        if not 0.0 <= self.spurious_rate < 1.0:
            raise InvalidParam(f"spurious_rate must be in [0, 1), got {self.spurious_rate}")
        if self.jitter_sigma < 0 or self.score_noise < 0 or self.score_margin <= 0:
            raise InvalidParam("sigmas must be >= 0 and score_margin > 0")


def mock_matcher(
    gt_coarse: MatchMap,
    gt_fine: MatchMap,
    corruption: Corruption,
    rng: np.random.Generator,
) -> tuple[MatchMap, MatchMap]:
    """Simulated matcher output: corrupted ground truth as raw score maps.

    Surviving true positives (and injected spurious pairs) get logits
    score_margin above a unit-Gaussian noise floor; their auxiliary
    channels are the ground-truth values plus Gaussian jitter.  Returns
    (coarse, fine) MatchMaps at level "scores".
    """
    pos_c = np.argwhere(gt_coarse.conf > 0)
    pos_f = np.argwhere(gt_fine.conf > 0)
    theta = 0.0
    if len(pos_c):
        i0, j0 = pos_c[0]
        theta = float(np.arctan2(gt_coarse.aux2[i0, j0], gt_coarse.aux1[i0, j0]))

    keep_c = rng.random(len(pos_c)) >= corruption.drop_rate
    keep_f = rng.random(len(pos_f)) >= corruption.drop_rate

    g = gt_coarse.grid
    n_sp = int(round(corruption.spurious_rate * len(pos_c)))
    sp_c: list[tuple[int, int]] = []
    sp_f: list[tuple[int, int]] = []
    taken = {(int(i), int(j)) for i, j in pos_c}
    while len(sp_c) < n_sp:
        i = int(rng.integers(0, g * g))
        j = int(rng.integers(0, g * g))
        if (i, j) in taken:
            continue
        taken.add((i, j))
        sp_c.append((i, j))
        da, db = int(rng.integers(0, 2)), int(rng.integers(0, 2))
        dc, dd = int(rng.integers(0, 2)), int(rng.integers(0, 2))
        fu = (2 * (i // g) + da) * 2 * g + (2 * (i % g) + db)
        fv = (2 * (j // g) + dc) * 2 * g + (2 * (j % g) + dd)
        sp_f.append((fu, fv))

    def base_scores(n: int, positives: np.ndarray, keep: np.ndarray):
        if corruption.score_noise > 0:
            s = rng.normal(0.0, corruption.score_noise, (n, n))
        else:
            s = np.zeros((n, n))
        for (i, j), kept in zip(positives, keep):
            if kept:
                s[i, j] += corruption.score_margin
        return s, np.zeros((n, n)), np.zeros((n, n))

    # coarse
    sc, ac1, ac2 = base_scores(gt_coarse.nm, pos_c, keep_c)
    for (i, j), kept in zip(pos_c, keep_c):
        if not kept:
            continue
        ang = theta + rng.normal(0.0, corruption.jitter_sigma) if corruption.jitter_sigma else theta
        ac1[i, j] = np.cos(ang)
        ac2[i, j] = np.sin(ang)
    for i, j in sp_c:
        sc[i, j] += corruption.score_margin
        if corruption.spurious_angle_offset is None:
            ang = rng.uniform(-np.pi, np.pi)
        else:
            ang = theta + corruption.spurious_angle_offset
        if corruption.jitter_sigma:
            ang += rng.normal(0.0, corruption.jitter_sigma)
        ac1[i, j] = np.cos(ang)
        ac2[i, j] = np.sin(ang)

    # fine
    sf, af1, af2 = base_scores(gt_fine.nm, pos_f, keep_f)
    for (u, v), kept in zip(pos_f, keep_f):
        if not kept:
            continue
        jr = rng.normal(0.0, corruption.jitter_sigma) if corruption.jitter_sigma else 0.0
        jc = rng.normal(0.0, corruption.jitter_sigma) if corruption.jitter_sigma else 0.0
        af1[u, v] = gt_fine.aux1[u, v] + jr
        af2[u, v] = gt_fine.aux2[u, v] + jc
    for u, v in sp_f:
        sf[u, v] += corruption.score_margin
        af1[u, v] = rng.uniform(-0.5, 0.5)
        af2[u, v] = rng.uniform(-0.5, 0.5)

    coarse = MatchMap(
        conf=sc, aux1=ac1, aux2=ac2, level=LEVEL_SCORES, grid=gt_coarse.grid, side=gt_coarse.side
    )
    fine = MatchMap(
        conf=sf, aux1=af1, aux2=af2, level=LEVEL_SCORES, grid=gt_fine.grid, side=gt_fine.side
    )
    return coarse, fine


def match_groups(conf: np.ndarray) -> dict:
    """Structure summary of a 0/1 ground-truth map: isolated vs one-to-multi.

    A positive is one-to-multi when it shares its row or column with
    another positive.
    """
    pos = np.argwhere(np.asarray(conf) > 0)
    rows: dict[int, int] = {}
    cols: dict[int, int] = {}
    for i, j in pos:
        rows[int(i)] = rows.get(int(i), 0) + 1
        cols[int(j)] = cols.get(int(j), 0) + 1
    multi = [(int(i), int(j)) for i, j in pos if rows[int(i)] > 1 or cols[int(j)] > 1]
    isolated = [(int(i), int(j)) for i, j in pos if rows[int(i)] == 1 and cols[int(j)] == 1]
    return {
        "positives": [(int(i), int(j)) for i, j in pos],
        "isolated": isolated,
        "multi": multi,
        "n_multi_rows": sum(1 for v in rows.values() if v > 1),
        "n_multi_cols": sum(1 for v in cols.values() if v > 1),
    }


def simulate_scores(
    coarse_gt: MatchMap,
    noise_sigma: float,
    rng: np.random.Generator,
    margin: float = 10.0,
) -> np.ndarray:
    """Simulated raw score matrix: positives sit ``margin`` units above
    the negatives, Gaussian noise is added everywhere."""
    shape = coarse_gt.conf.shape
    noise = rng.normal(0.0, noise_sigma, shape) if noise_sigma > 0 else np.zeros(shape)
    return noise + margin * (coarse_gt.conf > 0)


def analyze_normalizers(
    coarse_gt: MatchMap,
    scores: np.ndarray,
    ds_temperature: float = 1.0,
    sk_iters: int = 100,
    sk_epsilon: float = 1.0,
) -> dict:
    """Run both normalizers on the identical matrix and tabulate results.

    Per normalizer: ground-truth positives above 0.5 and 0.8, the global
    maximum, and the maximum over positives sharing a row or column (the
    one-to-multi part of the map).
    """
    groups = match_groups(coarse_gt.conf)
    pos = groups["positives"]
    outputs = {
        "dual_softmax": dual_softmax(scores, temperature=ds_temperature),
        "sinkhorn": sinkhorn(scores, iters=sk_iters, epsilon=sk_epsilon),
    }
    report: dict = {
        "n_positives": len(pos),
        "n_isolated": len(groups["isolated"]),
        "n_multi": len(groups["multi"]),
        "n_multi_rows": groups["n_multi_rows"],
        "n_multi_cols": groups["n_multi_cols"],
    }
    for name, conf in outputs.items():
        vals = np.array([conf[i, j] for i, j in pos]) if pos else np.zeros(0)
        multi_vals = (
            np.array([conf[i, j] for i, j in groups["multi"]]) if groups["multi"] else np.zeros(0)
        )
        report[name] = {
            "count_gt_pos": len(pos),
            "above_0.5": int((vals > 0.5).sum()),
            "above_0.8": int((vals > 0.8).sum()),
            "max": float(conf.max()),
            "max_on_multi": float(multi_vals.max()) if multi_vals.size else 0.0,
        }
    return report


def appendix_experiment(
    coarse_gt: MatchMap,
    noise_sigma: float,
    rng: np.random.Generator,
    margin: float = 10.0,
    ds_temperature: float = 1.0,
    sk_iters: int = 100,
    sk_epsilon: float = 1.0,
) -> dict:
    """One-to-multi normalizer comparison on a simulated score map.

    Builds the score matrix from the given ground-truth coarse map (which
    should contain at least one one-to-multi group for the comparison to
    be informative) and reports both normalizers' behavior on it.
    """
    scores = simulate_scores(coarse_gt, noise_sigma, rng, margin=margin)
    return analyze_normalizers(
        coarse_gt,
        scores,
        ds_temperature=ds_temperature,
        sk_iters=sk_iters,
        sk_epsilon=sk_epsilon,
    )

"""Square image grids: normalization, warping, cropping, and file I/O.

Warping follows the backward-sampling convention documented in
:mod:`patchreg.transforms`: every output pixel is pulled from the source
through the resampling matrix, using normalized coordinates with pixel
centers at integer indices and the image center at ``(L-1)/2``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidParam, RoleMismatch, SizeMismatch
from .transforms import ROLE_AFFINE, Mat3, TransformParams, build_affine


@dataclass(frozen=True)
class Raster:
    """Single-channel 2-D float image.

    value_range declares the nominal [lo, hi] of the data (set after
    normalization or on load); degenerate marks the all-zero output of
    normalizing a constant image.
    """

    data: np.ndarray
    value_range: tuple[float, float] | None = None
    degenerate: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 2 or data.size == 0:
            raise InvalidParam(f"raster data must be non-empty 2-D, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise InvalidParam("raster contains non-finite values")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def side(self) -> int:
        if self.height != self.width:
            raise SizeMismatch(f"raster is not square: {self.data.shape}")
        return self.height


def normalize(r: Raster, lo_pct: float = 0.5, hi_pct: float = 99.5) -> Raster:
    """Piecewise-linear normalization to [-1, 1].

    The lo_pct percentile maps to -1, the hi_pct percentile to +1, values
    in between linearly, values outside are clamped.  A constant image
    cannot be normalized; it comes back as all zeros with the degenerate
    flag set (and a warning).
    """
    if not 0.0 <= lo_pct < hi_pct <= 100.0:
        raise InvalidParam(f"bad percentile pair ({lo_pct}, {hi_pct})")
    lo = float(np.percentile(r.data, lo_pct))
    hi = float(np.percentile(r.data, hi_pct))
    if hi <= lo:
        warnings.warn("constant image: normalization is degenerate, returning zeros")
        return Raster(np.zeros_like(r.data), value_range=(-1.0, 1.0), degenerate=True)
    out = np.clip(2.0 * (r.data - lo) / (hi - lo) - 1.0, -1.0, 1.0)
    return Raster(out, value_range=(-1.0, 1.0))


def warp_by_affine(
    r: Raster, m: Mat3, interp: str = "bilinear", fill: float = 0.0
) -> Raster:
    """Resample a square raster through a resampling-role matrix.

    Output pixel (row, col) is pulled from the source at the location the
    matrix maps its normalized coordinates to; samples falling outside
    the source take ``fill``.
    """
    if m.role != ROLE_AFFINE:
        raise RoleMismatch(f"warp needs an {ROLE_AFFINE!r} matrix, got {m.role!r}")
    side = r.side
    if m.side != side:
        raise SizeMismatch(f"matrix side {m.side} != raster side {side}")
    if interp not in ("nearest", "bilinear"):
        raise InvalidParam(f"unknown interpolation {interp!r}")

    c = (side - 1) / 2.0
    h = side / 2.0
    rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    x_o = (cols - c) / h
    y_o = (rows - c) / h
    mm = m.m
    x_s = mm[0, 0] * x_o + mm[0, 1] * y_o + mm[0, 2]
    y_s = mm[1, 0] * x_o + mm[1, 1] * y_o + mm[1, 2]
    col_s = x_s * h + c
    row_s = y_s * h + c

    data = r.data
    if interp == "nearest":
        rn = np.floor(row_s + 0.5).astype(int)
        cn = np.floor(col_s + 0.5).astype(int)
        valid = (rn >= 0) & (rn < side) & (cn >= 0) & (cn < side)
        out = np.full((side, side), fill, dtype=float)
        out[valid] = data[rn[valid], cn[valid]]
    else:
        r0 = np.floor(row_s).astype(int)
        c0 = np.floor(col_s).astype(int)
        fr = row_s - r0
        fc = col_s - c0
        out = np.zeros((side, side), dtype=float)
        for dr, dc, w in (
            (0, 0, (1 - fr) * (1 - fc)),
            (0, 1, (1 - fr) * fc),
            (1, 0, fr * (1 - fc)),
            (1, 1, fr * fc),
        ):
            rr = r0 + dr
            cc = c0 + dc
            valid = (rr >= 0) & (rr < side) & (cc >= 0) & (cc < side)
            vals = np.where(valid, data[np.clip(rr, 0, side - 1), np.clip(cc, 0, side - 1)], fill)
            out += w * vals
    return Raster(out, value_range=r.value_range)


def warp_parametric(
    r: Raster, p: TransformParams, interp: str = "bilinear", fill: float = 0.0
) -> Raster:
    """Warp through the resampling matrix built from parametric values."""
    if p.side != r.side:
        raise SizeMismatch(f"params side {p.side} != raster side {r.side}")
    return warp_by_affine(r, build_affine(p), interp=interp, fill=fill)


def center_crop(r: Raster, out_side: int) -> Raster:
    """Central out_side x out_side crop; the top-left offset floors (side-out)/2."""
    side = r.side
    if out_side > side or out_side < 1:
        raise SizeMismatch(f"cannot crop side {side} to {out_side}")
    off = (side - out_side) // 2
    return Raster(r.data[off : off + out_side, off : off + out_side], value_range=r.value_range)


def channel_mean(channels: np.ndarray) -> np.ndarray:
    """Collapse an (h, w, c) stack to one channel by the per-pixel mean."""
    arr = np.asarray(channels, dtype=float)
    if arr.ndim == 2:
        return arr
    return arr.mean(axis=2)


# ---------------------------------------------------------------------------
# File formats: 16-bit binary PGM (interchange) and raw float32 + JSON sidecar
# (lossless pipeline storage).
# ---------------------------------------------------------------------------


def write_pgm(r: Raster, path: str | Path) -> None:
    """Write as 16-bit binary PGM, mapping value_range (or data extent) to 0..65535."""
    lo, hi = r.value_range if r.value_range is not None else (
        float(r.data.min()),
        float(r.data.max()),
    )
    if hi <= lo:
        hi = lo + 1.0
    scaled = np.clip((r.data - lo) / (hi - lo), 0.0, 1.0) * 65535.0
    counts = np.floor(scaled + 0.5).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{r.width} {r.height}\n65535\n".encode("ascii"))
        f.write(counts.tobytes())


def _read_pnm_header(f) -> tuple[bytes, int, int, int]:
    def token():
        tok = b""
        while True:
            ch = f.read(1)
            if not ch:
                raise InvalidParam("truncated PNM header")
            if ch in b" \t\r\n":
                if tok:
                    return tok
                continue
            if ch == b"#":
                f.readline()
                continue
            tok += ch

    magic = f.read(2)
    if magic not in (b"P5", b"P6"):
        raise InvalidParam(f"unsupported PNM magic {magic!r}")
    w = int(token())
    h = int(token())
    maxval = int(token())
    return magic, w, h, maxval


def read_pgm(path: str | Path, collapse_color: bool = False) -> Raster:
    """Read a binary PGM (P5) or, with collapse_color, a PPM (P6) via channel mean."""
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_pnm_header(f)
        dtype = ">u2" if maxval > 255 else np.uint8
        nchan = 3 if magic == b"P6" else 1
        raw = np.frombuffer(f.read(), dtype=dtype, count=w * h * nchan)
    if magic == b"P6":
        if not collapse_color:
            raise InvalidParam("color PPM input needs collapse_color=True")
        data = channel_mean(raw.reshape(h, w, 3).astype(float))
    else:
        data = raw.reshape(h, w).astype(float)
    return Raster(data, value_range=(0.0, float(maxval)))


def save_raster(r: Raster, basepath: str | Path) -> None:
    """Write <basepath>.f32 (little-endian float32, row-major) + <basepath>.json sidecar."""
    base = Path(basepath)
    base.parent.mkdir(parents=True, exist_ok=True)
    r.data.astype("<f4").tofile(base.with_suffix(".f32"))
    sidecar = {
        "h": r.height,
        "w": r.width,
        "range": list(r.value_range) if r.value_range is not None else None,
    }
    base.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def load_raster(basepath: str | Path) -> Raster:
    base = Path(basepath)
    sidecar = json.loads(base.with_suffix(".json").read_text())
    data = np.fromfile(base.with_suffix(".f32"), dtype="<f4").astype(float)
    data = data.reshape(sidecar["h"], sidecar["w"])
    rng = sidecar.get("range")
    return Raster(data, value_range=tuple(rng) if rng else None)

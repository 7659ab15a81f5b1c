"""Command-line driver for batch experiments.

Subcommands: synth, register, bench-normalizers, eval, convert.  Every
command is deterministic under a fixed seed and config; report paths
write delimited output plus rendered figures (suppress with --no-plot).
Wall-clock timings go to a separate timings.json so the deterministic
outputs stay byte-identical across runs.

Exit codes: 0 success, 2 usage/input error, 3 internal invariant violation.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from .errors import NoMatches, PatchRegError
from .matching import (
    Corruption,
    analyze_normalizers,
    dual_softmax,
    mock_matcher,
    simulate_scores,
    sinkhorn,
)
from .metrics import (
    EvalRecord,
    assign_bucket,
    bucket_by_rotation,
    read_records_csv,
    success_ratios,
    write_records_csv,
)
from .pipeline import PipelineConfig, evaluate_case, register_case
from .raster import Raster, load_raster, normalize, read_pgm, save_raster
from .synth import (
    MatchMap,
    SynthConfig,
    coarse_gt_for_params,
    demo_source,
    load_matchmap,
    load_pair,
    save_matchmap,
    save_pair,
    synth_pair,
)
from .transforms import (
    Mat3,
    TransformParams,
    affine_to_coord,
    build_affine,
    build_coord,
    coord_to_affine,
    decompose_params,
)

DEFAULT_EDGES = "0,45,90"


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _config_hash(obj) -> str:
    return hashlib.sha256(_canonical_json(obj).encode()).hexdigest()


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise click.UsageError(f"config file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise click.UsageError(f"config file is not valid JSON: {e}")


def _merged(section: dict, overrides: dict) -> dict:
    out = dict(section)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _parse_edges(text: str) -> list[float]:
    try:
        edges = [float(x) for x in text.split(",")]
    except ValueError:
        raise click.UsageError(f"bad bucket edges {text!r}")
    if len(edges) < 2 or sorted(edges) != edges:
        raise click.UsageError(f"bucket edges must be increasing: {text!r}")
    return edges


@click.group()
def cli():
    """Grid-patch matching and rigid registration toolkit."""


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


@cli.command()
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Dataset directory.")
@click.option("-n", "n_pairs", default=8, show_default=True, help="Number of pairs.")
@click.option("--seed", default=None, type=int, help="RNG seed (overrides config).")
@click.option("--config", "config_path", default=None, help="JSON config file.")
@click.option("--source", default=None, help="Source image (.pgm or raw .f32 basepath).")
@click.option("--mask", default=None, help="Source mask (.pgm or raw .f32 basepath).")
@click.option("--demo-sources", default=None, type=int, help="Generate K synthetic sources instead of loading files.")
@click.option("--src-side", default=None, type=int)
@click.option("--theta-min", default=None, type=float)
@click.option("--theta-max", default=None, type=float)
@click.option("--trans-range", default=None, type=float)
@click.option("--lo-pct", default=0.5, show_default=True, help="Lower normalization percentile.")
@click.option("--hi-pct", default=99.5, show_default=True, help="Upper normalization percentile.")
def synth(out_dir, n_pairs, seed, config_path, source, mask, demo_sources, src_side,
          theta_min, theta_max, trans_range, lo_pct, hi_pct):
    """Generate a dataset of synthetic pairs with ground truth."""
    file_cfg = _load_config_file(config_path)
    section = dict(file_cfg.get("synth", {}))
    if seed is None:
        seed = int(file_cfg.get("seed", section.get("seed", 0)))
    overrides = {"src_side": src_side, "trans_range": trans_range, "seed": seed}
    if src_side is not None:
        overrides["out_side"] = src_side // 2
    section = _merged(section, overrides)
    if theta_min is not None or theta_max is not None:
        lo, hi = section.get("theta_range_deg", (-45.0, 45.0))
        section["theta_range_deg"] = (
            theta_min if theta_min is not None else lo,
            theta_max if theta_max is not None else hi,
        )
    try:
        cfg = SynthConfig.from_json_dict(section)
        cfg.check_support()
    except PatchRegError as e:
        raise click.UsageError(str(e))

    sources: list[tuple[Raster, Raster]] = []
    if demo_sources:
        ss = np.random.SeedSequence([cfg.seed, 0xDE30])
        for child in ss.spawn(demo_sources):
            sources.append(demo_source(cfg.src_side, np.random.default_rng(child)))
    elif source and mask:
        img = read_pgm(source) if str(source).endswith(".pgm") else load_raster(source)
        msk = read_pgm(mask) if str(mask).endswith(".pgm") else load_raster(mask)
        if img.side != cfg.src_side or msk.side != cfg.src_side:
            raise click.UsageError(
                f"source rasters must be {cfg.src_side}^2, got {img.data.shape}/{msk.data.shape}"
            )
        img = normalize(img, lo_pct, hi_pct)
        msk = Raster((msk.data > 0.5 * (msk.value_range[1] if msk.value_range else 1.0)).astype(float))
        sources.append((img, msk))
    else:
        raise click.UsageError("provide --source/--mask or --demo-sources K")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    case_ids = []
    ss = np.random.SeedSequence([cfg.seed, 0x5A17])
    children = ss.spawn(n_pairs)
    for i in range(n_pairs):
        rng = np.random.default_rng(children[i])
        bright, msk = sources[i % len(sources)]
        pair = synth_pair(bright, msk, cfg, rng)
        case_id = f"case_{i:04d}"
        save_pair(pair, out / case_id)
        case_ids.append(case_id)
    manifest = {
        "n": n_pairs,
        "seed": cfg.seed,
        "config": cfg.to_json_dict(),
        "config_sha256": _config_hash(cfg.to_json_dict()),
        "cases": case_ids,
        "sources": "demo" if demo_sources else [str(source), str(mask)],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    click.echo(f"wrote {n_pairs} pairs to {out}")


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------


def _f32_roundtrip(m: MatchMap) -> MatchMap:
    """Round map values through the float32 file precision."""

    def f(a):
        return np.asarray(a).astype("<f4").astype(float)

    return MatchMap(
        conf=f(m.conf), aux1=f(m.aux1), aux2=f(m.aux2), level=m.level, grid=m.grid, side=m.side
    )


def _register_one(task: dict) -> dict:
    """Worker: register one case and return everything the parent writes."""
    case_dir = Path(task["case_dir"])
    pair = load_pair(case_dir)
    pcfg = PipelineConfig.from_json_dict(task["pipeline"])
    if task["matcher"] == "mock":
        rng = np.random.default_rng(np.random.SeedSequence(task["case_seed"]))
        corr_cfg = Corruption(**task["corruption"])
        sc, sf = mock_matcher(pair.gt_coarse, pair.gt_fine, corr_cfg, rng)
        if task["dump"]:
            # the dumped intermediates must be exactly what this run used,
            # so round through the file format's precision first
            sc, sf = _f32_roundtrip(sc), _f32_roundtrip(sf)
    else:
        try:
            sc = load_matchmap(case_dir / "scores_coarse")
            sf = load_matchmap(case_dir / "scores_fine")
        except FileNotFoundError:
            return {
                "case_id": task["case_id"],
                "error": f"missing score maps in {case_dir}",
            }
    out: dict = {"case_id": task["case_id"]}
    try:
        result = register_case(sc, sf, pcfg)
        out["fit"] = result.fit.to_json_dict()
        out["affine"] = result.affine.to_json_dict()
        out["coord"] = result.coord.to_json_dict()
        record = evaluate_case(task["case_id"], pair, result, bucket="")
    except NoMatches as e:
        out["failure"] = str(e)
        record = evaluate_case(task["case_id"], pair, None, bucket="")
        result = None
    out["record"] = {
        "theta_gt_deg": record.theta_gt_deg,
        "theta_err_deg": record.theta_err_deg,
        "corner_px": record.corner_px,
        "corner_pct": record.corner_pct,
        "n_matches": record.n_matches,
    }
    if task["dump"]:
        dump: dict = {"scores_coarse": sc, "scores_fine": sf}
        if result is not None:
            dump["conf_coarse"] = result.conf_coarse
            dump["conf_fine"] = result.conf_fine
            dump["kept_coarse"] = result.coarse_kept
        out["dump"] = dump
    return out


@cli.command()
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(), help="Dataset directory from synth.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--matcher", type=click.Choice(["mock", "files"]), default="mock", show_default=True)
@click.option("--config", "config_path", default=None, help="JSON config file.")
@click.option("--seed", default=None, type=int, help="Mock matcher seed.")
@click.option("--drop-rate", default=None, type=float)
@click.option("--spurious-rate", default=None, type=float)
@click.option("--jitter-sigma", default=None, type=float)
@click.option("--score-margin", default=None, type=float)
@click.option("--coarse-tau", default=None, type=float)
@click.option("--fine-tau", default=None, type=float)
@click.option("--z-k", default=None, type=float)
@click.option("--edges", default=DEFAULT_EDGES, show_default=True, help="Rotation bucket edges, degrees.")
@click.option("--jobs", default=1, show_default=True, help="Parallel workers.")
@click.option("--dump-intermediates", is_flag=True, help="Write score/confidence maps per case.")
@click.option("--plot/--no-plot", "do_plot", default=True, show_default=True)
def register(dataset_dir, out_dir, matcher, config_path, seed, drop_rate, spurious_rate,
             jitter_sigma, score_margin, coarse_tau, fine_tau, z_k, edges, jobs,
             dump_intermediates, do_plot):
    """Register every case of a dataset and evaluate against ground truth."""
    dataset = Path(dataset_dir)
    manifest_path = dataset / "manifest.json"
    if not manifest_path.exists():
        raise click.UsageError(f"no manifest.json under {dataset}")
    manifest = json.loads(manifest_path.read_text())
    case_ids = manifest["cases"]
    side = int(manifest["config"]["out_side"])

    file_cfg = _load_config_file(config_path)
    if seed is None:
        seed = int(file_cfg.get("seed", 0))
    corr = _merged(
        file_cfg.get("corruption", {}),
        {
            "drop_rate": drop_rate,
            "spurious_rate": spurious_rate,
            "jitter_sigma": jitter_sigma,
            "score_margin": score_margin,
        },
    )
    pipe = _merged(
        file_cfg.get("pipeline", {}),
        {"coarse_tau": coarse_tau, "fine_tau": fine_tau, "z_k": z_k},
    )
    try:
        corruption = Corruption(**corr)
        pcfg = PipelineConfig.from_json_dict(pipe)
    except (PatchRegError, TypeError) as e:
        raise click.UsageError(f"bad configuration: {e}")
    edge_list = _parse_edges(edges)

    ss = np.random.SeedSequence([seed, 0x4E6])
    case_seeds = [s.generate_state(8).tolist() for s in ss.spawn(len(case_ids))]
    tasks = [
        {
            "case_id": cid,
            "case_dir": str(dataset / cid),
            "matcher": matcher,
            "corruption": {
                "drop_rate": corruption.drop_rate,
                "spurious_rate": corruption.spurious_rate,
                "jitter_sigma": corruption.jitter_sigma,
                "score_margin": corruption.score_margin,
                "spurious_angle_offset": corruption.spurious_angle_offset,
            },
            "pipeline": pcfg.to_json_dict(),
            "case_seed": case_seeds[i],
            "dump": dump_intermediates,
        }
        for i, cid in enumerate(case_ids)
    ]

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_register_one, tasks))
    else:
        results = [_register_one(t) for t in tasks]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records: list[EvalRecord] = []
    for task, res in zip(tasks, results):
        if "error" in res:
            raise click.UsageError(res["error"])
        rec = res["record"]
        record = EvalRecord(
            case_id=res["case_id"],
            theta_gt_deg=rec["theta_gt_deg"],
            theta_err_deg=rec["theta_err_deg"],
            corner_px=rec["corner_px"],
            corner_pct=rec["corner_pct"],
            n_matches=rec["n_matches"],
            bucket=assign_bucket(rec["theta_gt_deg"], edge_list),
        )
        records.append(record)
        case_out = out / res["case_id"]
        case_out.mkdir(parents=True, exist_ok=True)
        fit_payload = {
            "fit": res.get("fit"),
            "affine": res.get("affine"),
            "coord": res.get("coord"),
            "failure": res.get("failure"),
        }
        (case_out / "fit.json").write_text(json.dumps(fit_payload, sort_keys=True) + "\n")
        if task["dump"] and "dump" in res:
            dump = res["dump"]
            save_matchmap(dump["scores_coarse"], Path(task["case_dir"]) / "scores_coarse")
            save_matchmap(dump["scores_fine"], Path(task["case_dir"]) / "scores_fine")
            for key in ("conf_coarse", "conf_fine", "kept_coarse"):
                if key in dump:
                    save_raster(Raster(np.asarray(dump[key], dtype=float)), case_out / key)

    write_records_csv(records, out / "records.csv")
    ratios = success_ratios(records, side)
    buckets = bucket_by_rotation(records, edge_list, side)
    summary = {
        "n_cases": len(records),
        "side": side,
        "pct_under_1": ratios["pct_under_1"],
        "pct_under_5": ratios["pct_under_5"],
        "n_failures": sum(1 for r in records if not math.isfinite(r.corner_px)),
        "buckets": buckets,
        "matcher": matcher,
        "seed": seed,
        "config_sha256": _config_hash({"corruption": corr, "pipeline": pipe, "seed": seed}),
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    with open(out / "success_curve.csv", "w") as f:
        f.write("threshold_pct,rate\n")
        for thr, rate in ratios["curve"]:
            f.write(f"{thr},{rate}\n")
    if do_plot:
        from .report import save_bucket_bars, save_success_curve

        save_success_curve(ratios["curve"], out / "success_curve.png")
        save_bucket_bars([b for b in buckets if b["n"]], out / "buckets.png")
    click.echo(
        f"{len(records)} cases: <1% {ratios['pct_under_1']:.1%}, <5% {ratios['pct_under_5']:.1%}"
    )


# ---------------------------------------------------------------------------
# bench-normalizers
# ---------------------------------------------------------------------------


@cli.command("bench-normalizers")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("-m", "n_trials", default=20, show_default=True, help="Number of random maps.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--noise-sigma", default=1.0, show_default=True, type=float)
@click.option("--margin", default=10.0, show_default=True, type=float)
@click.option("--theta-min", default=-90.0, show_default=True, type=float)
@click.option("--theta-max", default=90.0, show_default=True, type=float)
@click.option("--side", default=256, show_default=True, type=int)
@click.option("--grid", default=8, show_default=True, type=int)
@click.option("--plot/--no-plot", "do_plot", default=True, show_default=True)
def bench_normalizers(out_dir, n_trials, seed, noise_sigma, margin, theta_min, theta_max,
                      side, grid, do_plot):
    """Compare dual-softmax and Sinkhorn on simulated coarse score maps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trials = []
    timings = {"dual_softmax_us": [], "sinkhorn_us": []}
    pooled: dict[str, list] = {"dual_softmax": [], "sinkhorn": []}
    for t in range(n_trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBE7C, t]))
        theta = rng.uniform(theta_min, theta_max)
        tx, ty = rng.uniform(-side / 8, side / 8, 2)
        params = TransformParams(
            theta=math.radians(theta), scale=1.0, dx=tx, dy=ty, side=side
        )
        gt = coarse_gt_for_params(params, grid=grid)
        scores = simulate_scores(gt, noise_sigma, rng, margin=margin)
        t0 = time.perf_counter()
        ds_conf = dual_softmax(scores)
        t1 = time.perf_counter()
        sk_conf = sinkhorn(scores)
        t2 = time.perf_counter()
        timings["dual_softmax_us"].append((t1 - t0) * 1e6)
        timings["sinkhorn_us"].append((t2 - t1) * 1e6)

        rep = analyze_normalizers(gt, scores)
        rep["theta_deg"] = theta
        trials.append(rep)
        pos = np.argwhere(gt.conf > 0)
        pooled["dual_softmax"].extend(ds_conf[i, j] for i, j in pos)
        pooled["sinkhorn"].extend(sk_conf[i, j] for i, j in pos)

    n_strict = sum(
        1 for r in trials if r["dual_softmax"]["above_0.5"] > r["sinkhorn"]["above_0.5"]
    )
    n_sk_low_max = sum(1 for r in trials if r["sinkhorn"]["max"] <= 0.5)
    n_sk_low_multi = sum(
        1 for r in trials if r["n_multi"] and r["sinkhorn"]["max_on_multi"] <= 0.5
    )
    report = {
        "n_trials": n_trials,
        "noise_sigma": noise_sigma,
        "margin": margin,
        "trials": trials,
        "dual_softmax_strictly_more_above_0.5": n_strict,
        "sinkhorn_max_le_0.5": n_sk_low_max,
        "sinkhorn_max_on_multi_le_0.5": n_sk_low_multi,
        "config_sha256": _config_hash(
            {
                "n_trials": n_trials,
                "seed": seed,
                "noise_sigma": noise_sigma,
                "margin": margin,
                "theta": [theta_min, theta_max],
                "side": side,
                "grid": grid,
            }
        ),
    }
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    (out / "timings.json").write_text(
        json.dumps(
            {
                "dual_softmax_us_median": float(np.median(timings["dual_softmax_us"])),
                "sinkhorn_us_median": float(np.median(timings["sinkhorn_us"])),
                "per_call": timings,
            },
            sort_keys=True,
            indent=1,
        )
        + "\n"
    )
    if do_plot:
        from .report import save_normalizer_histogram

        save_normalizer_histogram(
            {k: np.array(v) for k, v in pooled.items()},
            out / "normalizers.png",
            title="confidence at ground-truth positives",
        )
    click.echo(
        f"{n_trials} trials: dual-softmax strictly more above 0.5 in {n_strict}, "
        f"sinkhorn max<=0.5 in {n_sk_low_max}"
    )


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


@cli.command("eval")
@click.option("--records", "records_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--edges", default=DEFAULT_EDGES, show_default=True)
@click.option("--side", default=256, show_default=True, type=int)
@click.option("--plot/--no-plot", "do_plot", default=True, show_default=True)
def eval_cmd(records_path, out_dir, edges, side, do_plot):
    """Summarize a records CSV: success ratios, curve, rotation buckets."""
    if not Path(records_path).exists():
        raise click.UsageError(f"records CSV not found: {records_path}")
    try:
        records = read_records_csv(records_path)
    except (PatchRegError, ValueError, KeyError) as e:
        raise click.UsageError(f"malformed records CSV: {e}")
    if not records:
        raise click.UsageError("records CSV is empty")
    edge_list = _parse_edges(edges)
    records = [
        EvalRecord(
            case_id=r.case_id,
            theta_gt_deg=r.theta_gt_deg,
            theta_err_deg=r.theta_err_deg,
            corner_px=r.corner_px,
            corner_pct=r.corner_pct,
            n_matches=r.n_matches,
            bucket=assign_bucket(r.theta_gt_deg, edge_list),
        )
        for r in records
    ]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ratios = success_ratios(records, side)
    buckets = bucket_by_rotation(records, edge_list, side)
    summary = {
        "n_cases": len(records),
        "side": side,
        "pct_under_1": ratios["pct_under_1"],
        "pct_under_5": ratios["pct_under_5"],
        "buckets": buckets,
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    with open(out / "success_curve.csv", "w") as f:
        f.write("threshold_pct,rate\n")
        for thr, rate in ratios["curve"]:
            f.write(f"{thr},{rate}\n")
    if do_plot:
        from .report import save_bucket_bars, save_success_curve

        save_success_curve(ratios["curve"], out / "success_curve.png")
        save_bucket_bars([b for b in buckets if b["n"]], out / "buckets.png")
    click.echo(f"<1%: {ratios['pct_under_1']:.1%}  <5%: {ratios['pct_under_5']:.1%}")


# ---------------------------------------------------------------------------
# convert
# ---------------------------------------------------------------------------


@cli.command()
@click.option("--in", "in_path", required=True, type=click.Path(), help="Matrix or params JSON.")
@click.option("--to", "target", required=True, type=click.Choice(["affine", "coord", "params"]))
@click.option("--out", "out_path", required=True, type=click.Path())
def convert(in_path, target, out_path):
    """Convert between matrix roles and parametric form."""
    p = Path(in_path)
    if not p.exists():
        raise click.UsageError(f"input not found: {in_path}")
    try:
        payload = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise click.UsageError(f"input is not valid JSON: {e}")
    try:
        if "m" in payload:
            obj = Mat3.from_json_dict(payload)
        elif "theta_deg" in payload:
            obj = TransformParams.from_json_dict(payload)
        else:
            raise click.UsageError("input JSON is neither a matrix nor a params object")

        if target == "params":
            result = obj.to_json_dict() if isinstance(obj, TransformParams) else decompose_params(obj).to_json_dict()
        elif target == "affine":
            if isinstance(obj, TransformParams):
                result = build_affine(obj).to_json_dict()
            elif obj.role == "affine":
                result = obj.to_json_dict()
            else:
                result = coord_to_affine(obj).to_json_dict()
        else:
            if isinstance(obj, TransformParams):
                result = build_coord(obj).to_json_dict()
            elif obj.role == "coord":
                result = obj.to_json_dict()
            else:
                result = affine_to_coord(obj).to_json_dict()
    except PatchRegError as e:
        raise click.UsageError(f"conversion failed: {e}")
    Path(out_path).write_text(json.dumps(result, sort_keys=True) + "\n")
    click.echo(f"wrote {out_path}")


def main():
    try:
        cli(standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(130)
    except click.UsageError as e:
        e.show()
        sys.exit(2)
    except click.ClickException as e:
        e.show()
        sys.exit(e.exit_code)
    except PatchRegError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    except Exception as e:  # pragma: no cover - internal invariant violations
        click.echo(f"internal error: {type(e).__name__}: {e}", err=True)
        sys.exit(3)


if __name__ == "__main__":
    main()

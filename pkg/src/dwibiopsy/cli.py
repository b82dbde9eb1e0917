"""``dwibiopsy`` command line: one subcommand per protocol stage, files in between."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import density, grid, ivim, needle, partition, report, simulate
from .config import PipelineConfig, load_config
from .errors import BiopsyError, InvalidArgument
from .gridio import load_grid, save_grid

log = logging.getLogger("dwibiopsy")

REPORT_COLUMNS = ("strategy", "n_biopsy", "access", "rho_bar", "s", "cell_load")
SUMMARY_COLUMNS = (
    "strategy",
    "n_biopsy",
    "n_interventions",
    "mean_rho_bar",
    "sd_rho_bar",
    "hit_fraction",
    "median_s",
    "modal_s",
    "modal_s_distance",
    "mu_rho",
    "sigma_rho",
)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _need(path: str) -> str:
    if not os.path.exists(path):
        raise InvalidArgument(f"missing input: {path}", path=path)
    return path


def _read_json(path: str):
    with open(_need(path), encoding="utf-8") as fh:
        return json.load(fh)


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


# ---------------------------------------------------------------------------
# phantom / dmap / interp


def cmd_phantom(args) -> None:
    cfg = _config(args)
    spec = replace(cfg.phantom, sigma_noise=cfg.sigma_noise, U=cfg.U, seed=cfg.seed)
    ph = simulate.generate_phantom(spec)
    simulate.save_phantom(ph, args.out)
    report.write_text(os.path.join(args.out, "config.json"), replace(cfg, phantom=spec).to_json())
    if args.with_dwi:
        stack = ivim.synthesize_dwi(ph.dmap, ph.labels, args.b_values, noise=args.dwi_noise, seed=cfg.seed)
        for b, g in zip(args.b_values, stack):
            save_grid(g, os.path.join(args.out, f"dwi_b{b:g}.grid"))
    log.info("phantom: mu_rho=%.6g sigma_rho=%.6g", ph.mu_rho, ph.sigma_rho)


def cmd_dmap(args) -> None:
    stack = [load_grid(_need(p)) for p in args.dwi]
    labels = load_grid(_need(args.labels))
    dmap = ivim.build_dmap(stack, labels, args.b_values, args.max_residual)
    save_grid(dmap, args.out)


def cmd_interp(args) -> None:
    cfg = _config(args)
    dmap = load_grid(_need(args.dmap))
    labels = load_grid(_need(args.labels))
    rows = grid.kl_convergence(dmap, labels, range(1, args.u_max + 1), args.slice)
    report.write_csv(args.out, rows, ("U", "kl_bits", "mean", "sd", "n", "mean_orig", "sd_orig"))
    if args.svg:
        text = report.curve_svg(
            [r["U"] for r in rows], [r["kl_bits"] for r in rows], title="KL divergence vs U", xlabel="U", ylabel="KL (bits)"
        )
        report.write_text(args.svg, text)
    if args.grid_out:
        k = dmap.dims[2] // 2 if args.slice is None else args.slice
        g = grid.ScalarGrid3(dmap.values[:, :, k : k + 1], dmap.spacing_mm, dmap.origin_mm, dmap.unit)
        m = grid.LabelGrid3(labels.labels[:, :, k : k + 1], labels.spacing_mm, labels.origin_mm)
        save_grid(grid.resample_bicubic(g, m, cfg.U, z_factor=1), args.grid_out)
        if args.labels_out:
            save_grid(grid.upsample_labels(m, cfg.U, 1), args.labels_out)


# ---------------------------------------------------------------------------
# partition / plan


def _slice_inputs(dmap_path: str, labels_path: str, k: int | None):
    dmap = load_grid(_need(dmap_path))
    labels = load_grid(_need(labels_path))
    grid.check_geometry(dmap, labels)
    k = dmap.dims[2] // 2 if k is None else k
    return dmap, labels, dmap.slice2d(k), labels.slice2d(k), k


def cmd_partition(args) -> None:
    cfg = _config(args)
    n = args.n_biopsy or cfg.n_biopsy
    dmap, labels, d2, l2, _ = _slice_inputs(args.dmap, args.labels, args.slice)
    part = partition.superpixels_2d(
        d2, l2, cfg.superpixel_area_mm2, min_boundary_mm=cfg.exclusion_boundary_mm
    )
    vital = l2.values == grid.TUMOR
    targets = partition.optimal_d_values(d2.values[vital], n, cfg.target_mode, percentiles=cfg.percentiles)
    os.makedirs(args.out, exist_ok=True)
    lab = part.region_labels.astype(np.float64)[:, :, None]
    save_grid(grid.ScalarGrid3(lab, dmap.spacing_mm, dmap.origin_mm, grid.DIMENSIONLESS), os.path.join(args.out, "regions.grid"))
    rows = [r.to_row() for r in part.regions]
    report.write_csv(os.path.join(args.out, "regions.csv"), rows, list(rows[0]) if rows else ["id"])
    report.write_json(os.path.join(args.out, "targets.json"), targets.to_dict())
    try:
        cands = partition.select_candidates(part, targets, cfg.exclusion_boundary_mm)
        out = {
            "status": "ok",
            "candidates": [
                {"target_index": c.target_index, "target": c.target, "region": c.region.id, "mean_d": c.region.mean_d}
                for c in cands
            ],
        }
    except BiopsyError as exc:
        # planning can still fall back to per-access selection
        log.warning("global candidate selection failed: %s", exc)
        out = {"status": "infeasible", **exc.to_dict()}
    report.write_json(os.path.join(args.out, "candidates.json"), out)


def load_partition(directory: str) -> partition.SuperpixelPartition:
    g = load_grid(_need(os.path.join(directory, "regions.grid")))
    rows = report.read_csv(_need(os.path.join(directory, "regions.csv")))
    regions = tuple(partition.Region.from_row(r) for r in rows)
    lab = np.rint(g.values[:, :, 0]).astype(np.int64)
    return partition.SuperpixelPartition(lab, regions, g.spacing_mm[:2], g.origin_mm[:2])


def load_targets(path: str) -> partition.OptimalDTargets:
    d = _read_json(path)
    return partition.OptimalDTargets(
        int(d["n_biopsy"]), tuple(d["targets"]), d["mode"], d["d_min"], d["d_max"], d["d_median"]
    )


def cmd_plan(args) -> None:
    cfg = _config(args)
    dmap, labels, d2, l2, k = _slice_inputs(args.dmap, args.labels, args.slice)
    fields = {"d": d2}
    if args.rho:
        rho = load_grid(_need(args.rho))
        grid.check_geometry(rho, dmap)
        fields["rho"] = rho.slice2d(k)
    part = load_partition(args.partition)
    targets = load_targets(os.path.join(args.partition, "targets.json"))
    planner = needle.NeedlePlanner(l2, cfg.constraints, fields, part.as_slice())
    plan = needle.plan_guided(planner, part, targets, cfg.exclusion_boundary_mm, cfg.gate, cfg.guidance)
    report.write_json(
        args.out,
        {
            "mode": plan.mode,
            "n_feasible": plan.n_feasible,
            "targets": targets.to_dict(),
            "interventions": [p.to_dict() for p in plan.plans],
        },
    )


# ---------------------------------------------------------------------------
# simulate / report


def cmd_simulate(args) -> None:
    cfg = _config(args)
    ph = simulate.load_phantom(_need(args.phantom))
    os.makedirs(args.out, exist_ok=True)
    part = planner = None
    summary = {"mu_rho": ph.mu_rho, "sigma_rho": ph.sigma_rho, "true_cell_load": ph.true_cell_load(), "runs": []}
    reports = []
    for n in args.n_biopsy or [cfg.n_biopsy]:
        for strategy in args.strategies:
            if strategy == "guided" and part is None:
                part = simulate.phantom_partition(ph, cfg.superpixel_area_mm2, cfg.exclusion_boundary_mm)
                planner = None
            if planner is None:
                planner = simulate.phantom_planner(ph, cfg.constraints, part)
            r = simulate.run_strategy(
                ph,
                strategy,
                cfg.constraints,
                n,
                args.reps or cfg.n_reps,
                cfg.seed,
                planner=planner,
                partition=part,
                max_interventions=cfg.max_interventions,
                workers=args.workers,
                target_mode=cfg.target_mode,
                guidance=cfg.guidance,
                percentiles=cfg.percentiles,
                min_boundary_mm=cfg.exclusion_boundary_mm,
                gate=cfg.gate,
            )
            reports.append(r)
            name = f"report_{strategy}_n{n}.csv"
            report.write_csv(os.path.join(args.out, name), r.rows(), REPORT_COLUMNS)
            summary["runs"].append({"strategy": strategy, "n_biopsy": n, "file": name, "fit": r.fit})
    comp = simulate.compare_report(reports)
    summary["comparison"] = [dict(row.__dict__) for row in comp["rows"]]
    report.write_json(os.path.join(args.out, "summary.json"), summary)
    _write_histograms(args.out, comp)


def _write_histograms(out: str, comp: dict) -> None:
    for h in comp["histograms"]:
        rows = []
        for kind in ("rho_bar", "s"):
            e = comp["edges"][kind]
            for k, c in enumerate(h[kind]):
                rows.append({"kind": kind, "bin_lo": e[k], "bin_hi": e[k + 1], "count": int(c)})
        report.write_csv(
            os.path.join(out, f"hist_{h['strategy']}_n{h['n_biopsy']}.csv"), rows, ("kind", "bin_lo", "bin_hi", "count")
        )


def _report_from_csv(path: str, mu: float, sigma: float) -> simulate.StrategyReport:
    rows = report.read_csv(_need(path))
    if not rows:
        raise InvalidArgument(f"{path} holds no interventions")

    def col(key):
        return np.array([float(r[key]) if r[key] != "" else np.nan for r in rows])

    return simulate.StrategyReport(
        rows[0]["strategy"],
        int(rows[0]["n_biopsy"]),
        col("rho_bar"),
        col("s"),
        mu,
        sigma,
        col("cell_load"),
        col("access").astype(np.int64),
    )


def cmd_report(args) -> None:
    summary = _read_json(os.path.join(args.simulate, "summary.json"))
    mu, sigma = float(summary["mu_rho"]), float(summary["sigma_rho"])
    reports = [_report_from_csv(os.path.join(args.simulate, run["file"]), mu, sigma) for run in summary["runs"]]
    comp = simulate.compare_report(reports)
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "comparison.csv"), [row.__dict__ for row in comp["rows"]], SUMMARY_COLUMNS)
    for h in comp["histograms"]:
        tag = f"{h['strategy']}_n{h['n_biopsy']}"
        hm = grid.Histogram(comp["edges"]["rho_bar"], h["rho_bar"])
        report.emit_histogram_svg(
            hm,
            [("mu", mu), ("mu-10%", 0.9 * mu), ("mu+10%", 1.1 * mu)],
            os.path.join(args.out, f"rho_bar_{tag}.svg"),
            title=f"{h['strategy']} N={h['n_biopsy']}: mean density",
            xlabel="rho_bar (cells/mm^3)",
        )
        hs = grid.Histogram(comp["edges"]["s"], h["s"])
        report.emit_histogram_svg(
            hs,
            [("sigma", sigma)],
            os.path.join(args.out, f"s_{tag}.svg"),
            title=f"{h['strategy']} N={h['n_biopsy']}: sample SD",
            xlabel="s (cells/mm^3)",
        )
    if args.kl:
        rows = report.read_csv(_need(args.kl))
        text = report.curve_svg(
            [float(r["U"]) for r in rows],
            [float(r["kl_bits"]) for r in rows],
            title="KL divergence vs U",
            xlabel="U",
            ylabel="KL (bits)",
        )
        report.write_text(os.path.join(args.out, "kl_vs_u.svg"), text)


# ---------------------------------------------------------------------------
# estimate


def _samples(args) -> np.ndarray:
    if args.plan:
        plan = _read_json(args.plan)
        pts = [(p["d_value"], p["rho"]) for iv in plan["interventions"] for p in iv["paths"] if "rho" in p]
    else:
        rows = report.read_csv(_need(args.samples))
        pts = [(float(r["d_value"]), float(r["rho"])) for r in rows]
    if not pts:
        raise InvalidArgument("no (d_value, rho) samples in the input")
    return np.array(pts, dtype=np.float64)


def cmd_estimate(args) -> None:
    if not (args.plan or args.samples):
        raise InvalidArgument("estimate needs --plan or --samples")
    dmap = load_grid(_need(args.dmap))
    labels = load_grid(_need(args.labels))
    grid.check_geometry(dmap, labels)
    pts = _samples(args)
    fit = density.fit_linear(pts)
    model = density.DensityModel3d.from_fit(fit)
    rho3d = density.density_map_3d(dmap, model, labels)
    load = density.cell_load(rho3d, labels)
    os.makedirs(args.out, exist_ok=True)
    save_grid(rho3d, os.path.join(args.out, "density_3d.grid"))
    rows = [
        {"d_value": d, "rho": r, "fitted": float(fit.raw(d)), "residual": float(r - fit.raw(d))} for d, r in pts
    ]
    report.write_csv(os.path.join(args.out, "regression.csv"), rows, ("d_value", "rho", "fitted", "residual"))
    out = {
        "model": fit.to_dict(),
        "cell_load": load,
        "rho_max": model.rho_max_A,
        "d_zero": model.d_zero,
    }
    if fit.n > 2:
        lo, hi = density.prediction_interval(fit, float(np.mean(pts[:, 0])), kind="confidence")
        out["mean_density_ci95"] = [lo, hi]
    report.write_json(os.path.join(args.out, "estimate.json"), out)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dwibiopsy", description="DWI-guided biopsy planning and simulation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="PipelineConfig JSON")
        if seed:
            sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--workers", type=int, default=1, help="thread count (results do not depend on it)")

    sp = sub.add_parser("phantom", help="generate a synthetic phantom")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--with-dwi", action="store_true", help="also write a synthetic DWI stack")
    sp.add_argument("--b-values", type=_float_list, default=list(ivim.REF_B_VALUES))
    sp.add_argument("--dwi-noise", type=float, default=0.0)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("dmap", help="fit a D-map from a DWI stack")
    common(sp, seed=False)
    sp.add_argument("--dwi", nargs="+", required=True, help="one grid per b-value, ascending b")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--b-values", type=_float_list, default=list(ivim.REF_B_VALUES))
    sp.add_argument("--max-residual", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_dmap)

    sp = sub.add_parser("interp", help="upsample a slice and tabulate KL divergence vs U")
    common(sp, seed=False)
    sp.add_argument("--dmap", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--u-max", type=int, default=60)
    sp.add_argument("--slice", type=int)
    sp.add_argument("--out", required=True, help="KL-vs-U CSV")
    sp.add_argument("--svg")
    sp.add_argument("--grid-out", help="write the slice upsampled by the config U")
    sp.add_argument("--labels-out")
    sp.set_defaults(func=cmd_interp)

    sp = sub.add_parser("partition", help="superpixels, target D-values and candidates")
    common(sp, seed=False)
    sp.add_argument("--dmap", required=True, help="planning-resolution D-map")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--slice", type=int)
    sp.add_argument("--n-biopsy", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_partition)

    sp = sub.add_parser("plan", help="guided interventions")
    common(sp, seed=False)
    sp.add_argument("--dmap", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--partition", required=True, help="output directory of `partition`")
    sp.add_argument("--rho", help="density grid sampled along with D")
    sp.add_argument("--slice", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", help="Monte Carlo comparison of biopsy strategies")
    common(sp)
    sp.add_argument("--phantom", required=True)
    sp.add_argument("--strategies", type=lambda t: t.split(","), default=["guided", "random"])
    sp.add_argument("--n-biopsy", type=_int_list)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("estimate", help="density model, density map and cell load")
    common(sp, seed=False)
    sp.add_argument("--dmap", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--plan")
    sp.add_argument("--samples", help="CSV with d_value and rho columns")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("report", help="comparison table and SVG histograms")
    common(sp, seed=False)
    sp.add_argument("--simulate", required=True, help="output directory of `simulate`")
    sp.add_argument("--kl", help="KL-vs-U CSV from `interp`")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "workers", 1) < 1:
            raise InvalidArgument("--workers must be >= 1")
        if getattr(args, "strategies", None):
            bad = [s for s in args.strategies if s not in simulate.STRATEGIES]
            if bad:
                raise InvalidArgument(f"unknown strategies {bad}")
        args.func(args)
    except BiopsyError as exc:
        sys.stderr.write(json.dumps(exc.to_dict(), sort_keys=True, default=str) + "\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "io-error", "message": str(exc), "details": {}}) + "\n")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

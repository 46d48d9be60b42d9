"""Command-line pipeline: simulate, explore, fit, bayes, diagnose,
bootstrap, profile, predict, export-viewer, serve.

Every command is a pure function of (config file, input files, seed):
artifacts are written under --out with canonical formatting, so reruns are
byte-identical. A per-command manifest records the config hash, package
versions and the seed actually used. Exit codes: 0 success, 2 validation
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bayes import McmcControl, PosteriorDraws, PriorSpec, fit_bayes, posterior_summaries
from .diagnostics import gof_simulation_test, permutation_independence_test
from .errors import NumericalError, PrevmapError, ValidationError
from .exploratory import (
    default_spatial_edges,
    empirical_variogram,
    fit_nonspatial_glmm,
    ls_variogram_fit,
)
from .kernels import CorrelationParams, cholesky_with_jitter, correlation_matrix
from .mcml import (
    BootstrapSet,
    FittedModel,
    McmlControl,
    fit_mcml,
    parametric_bootstrap,
    profile_deviance_xi,
)
from .prediction import (
    ParamUncertaintyMode,
    conditional_simulate,
    district_average,
    load_bundle,
    save_bundle,
)
from .rng import substream, substream_seed
from .surveys import (
    PredictionGrid,
    SurveyDataset,
    SurveyRecord,
    build_design,
    grid_from_bbox,
    grid_from_csv,
    load_region_polygons,
    load_surveys,
    save_surveys,
)

COMMANDS = ("simulate", "explore", "fit", "bayes", "diagnose", "bootstrap",
            "profile", "predict", "export-viewer", "serve")


def _json_dump(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(canon).hexdigest()


def _write_manifest(out: Path, command: str, config: dict, seed: int) -> None:
    import scipy
    _json_dump({
        "command": command,
        "config_sha256": _config_hash(config),
        "seed": seed,
        "versions": {"prevmap": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
    }, out / f"manifest_{command.replace('-', '_')}.json")


def _load_config(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _resolve(base: Path, path_str: str) -> Path:
    p = Path(path_str)
    return p if p.is_absolute() else (base / p)


def _model_terms(config: dict):
    terms = config.get("model", {}).get("terms", [])
    return [t if isinstance(t, str) else tuple(t) for t in terms]


def _model_family(config: dict) -> dict:
    model = config.get("model", {})
    kappa = model.get("kappa", 0.5)
    return {"kappa": 0.5 if kappa == "select" else float(kappa),
            "delta": float(model.get("delta", 0.0)),
            "xi": float(model.get("xi", 0.0))}


def _params_from_dict(d: dict, family: dict) -> CorrelationParams:
    merged = {**family, **{k: float(v) for k, v in d.items()}}
    return CorrelationParams(**merged)


def _load_dataset(config: dict, base: Path) -> SurveyDataset:
    data = config.get("data", {})
    if "path" not in data:
        raise ValidationError("config.data.path is required")
    path = _resolve(base, data["path"])
    if not path.exists():
        raise ValidationError(f"data file not found: {path}")
    return load_surveys(path, schema=data.get("schema"))


def _init_params(config: dict, out: Path, family: dict) -> CorrelationParams:
    model = config.get("model", {})
    if "init" in model:
        return _params_from_dict(model["init"], family)
    init_path = out / "init_params.json"
    if init_path.exists():
        with open(init_path) as fh:
            return _params_from_dict(json.load(fh)["params"], family)
    raise ValidationError("no initial parameters: set model.init or run `explore` first")


def _variogram_edges(config: dict, coords: np.ndarray):
    explore = config.get("explore", {})
    if "u_edges" in explore:
        u_edges = np.asarray(explore["u_edges"], dtype=float)
    else:
        u_edges = default_spatial_edges(coords[:, :2], n_bins=int(explore.get("n_spatial_bins", 12)))
    if "v_edges" in explore:
        v_edges = np.asarray(explore["v_edges"], dtype=float)
    else:
        times = np.unique(coords[:, 2])
        gaps = np.diff(times)
        step = float(gaps.min()) if gaps.size else 1.0
        v_edges = np.arange(0.0, float(times.max() - times.min()) + step, step)
        if v_edges.size < 2:
            v_edges = np.array([0.0, step])
    return u_edges, v_edges


# --- commands ------------------------------------------------------------------

def cmd_simulate(config: dict, out: Path, base: Path, seed: int) -> None:
    spec = config.get("simulate", {})
    family = _model_family(config)
    params = _params_from_dict(spec["params"], family)
    beta = np.asarray(spec["beta"], dtype=float)
    bbox = spec.get("bbox", [0.0, 0.0, 300.0, 300.0])
    times = [float(t) for t in spec.get("times", [0.0])]
    n_sites = int(spec.get("n_sites", 60))
    n_tested = int(spec.get("n_tested", 100))
    cov_ranges = spec.get("covariates", {})

    rng = substream(seed, "simulate")
    xs = rng.uniform(bbox[0], bbox[2], n_sites)
    ys = rng.uniform(bbox[1], bbox[3], n_sites)
    coords = np.column_stack([np.tile(xs, len(times)), np.tile(ys, len(times)),
                              np.repeat(times, n_sites)])
    m = coords.shape[0]
    cov_values = {name: rng.uniform(float(lo), float(hi), m)
                  for name, (lo, hi) in cov_ranges.items()}

    terms = _model_terms(config)
    from .surveys import build_design_from_values
    design = build_design_from_values(cov_values, terms, m)
    if design.p != beta.size:
        raise ValidationError(f"beta has {beta.size} entries but the design has {design.p} columns")

    chol = cholesky_with_jitter(correlation_matrix(coords, params), scale=1.0)
    w = (design.rows @ beta
         + math.sqrt(params.sigma2) * (chol @ rng.standard_normal(m))
         + math.sqrt(params.tau2) * rng.standard_normal(m))
    from .exploratory import expit
    p = expit(w)
    y = rng.binomial(np.full(m, n_tested), p)

    records = []
    for k in range(m):
        site = k % n_sites
        t_index = k // n_sites
        records.append(SurveyRecord(
            id=f"s{site}_t{t_index}", x=float(coords[k, 0]), y=float(coords[k, 1]),
            t=float(coords[k, 2]), n_tested=n_tested, n_positive=int(y[k]),
            covariates={name: float(cov_values[name][k]) for name in cov_values}))
    dataset = SurveyDataset(records=records, design_columns=tuple(cov_values),
                            region_bbox=(bbox[0], bbox[1], bbox[2], bbox[3]))
    save_surveys(dataset, out / "dataset.csv")
    _json_dump({"beta": beta.tolist(), "params": params.to_dict(), "seed": seed,
                "n_sites": n_sites, "times": times, "n_tested": n_tested,
                "marginal_mean_prevalence": float(np.mean(p))},
               out / "truth.json")


def cmd_explore(config: dict, out: Path, base: Path, seed: int) -> None:
    dataset = _load_dataset(config, base)
    design = build_design(dataset, _model_terms(config))
    family = _model_family(config)
    explore = config.get("explore", {})

    residuals = fit_nonspatial_glmm(dataset, design,
                                    estimator=explore.get("estimator", "mode"))
    coords = dataset.coords
    u_edges, v_edges = _variogram_edges(config, coords)
    table = empirical_variogram(residuals, coords[:, :2], coords[:, 2], u_edges, v_edges)
    table.to_csv(out / "variogram.csv")

    envelope = permutation_independence_test(
        residuals, coords[:, :2], coords[:, 2], u_edges, v_edges,
        b_replicates=int(explore.get("b_permutation", 1000)),
        seed=substream_seed(seed, "permutation"))
    envelope.save_json(out / "permutation_test.json")
    envelope.plot_data_csv(out / "permutation_envelope.csv")

    ls = ls_variogram_fit(table, family=_params_from_dict({"sigma2": 1.0, "tau2": 0.1,
                                                           "phi": 1.0, "psi": 1.0}, family),
                          weighted=bool(explore.get("weighted_ls", False)))
    _json_dump({"params": ls.params.to_dict(), "objective": ls.objective,
                "weighted": ls.weighted, "nonspatial_beta": residuals.model.beta.tolist(),
                "nonspatial_tau2": residuals.model.tau2},
               out / "init_params.json")


def _fit_summary_lines(fit: FittedModel, boot: BootstrapSet | None = None) -> list:
    from .errors import SingularHessianError
    pb = dict()
    if boot is not None:
        pb = {name: (lo, hi) for name, lo, hi in boot.percentile_intervals()}
    try:
        rows = fit.summary_rows()
    except SingularHessianError:
        rows = None
    lines = ["Parameter     Estimate      95% CI (GA)" + ("           95% CI (PB)" if boot else "")]
    if rows is None:
        import math as _math
        estimates = []
        for k, name in enumerate(fit.names):
            est = float(fit.lambda_vector[k])
            if name.startswith("log_"):
                estimates.append((name[4:], _math.exp(est)))
            else:
                estimates.append((name, est))
        for name, est in estimates:
            row = f"{name:<12}  {est:>8.3f}  (information singular)"
            if name in pb:
                row += f"  ({pb[name][0]:>8.3f}, {pb[name][1]:>8.3f})"
            lines.append(row)
        lines.append("warning: observed information is singular; GA intervals unavailable")
        return lines
    for name, est, lo, hi in rows:
        row = f"{name:<12}  {est:>8.3f}  ({lo:>8.3f}, {hi:>8.3f})"
        if name in pb:
            row += f"  ({pb[name][0]:>8.3f}, {pb[name][1]:>8.3f})"
        lines.append(row)
    return lines


def cmd_fit(config: dict, out: Path, base: Path, seed: int) -> None:
    dataset = _load_dataset(config, base)
    design = build_design(dataset, _model_terms(config))
    family = _model_family(config)
    init = _init_params(config, out, family)
    fit_cfg = config.get("fit", {})
    control = McmlControl(**fit_cfg.get("control", {}))
    free = tuple(fit_cfg.get("free", ("sigma2", "phi", "nu2", "psi")))
    if config.get("model", {}).get("kappa") == "select":
        from .mcml import fit_mcml_select_kappa
        fit, rel = fit_mcml_select_kappa(dataset, design, init_params=init, control=control,
                                         seed=substream_seed(seed, "fit"), free=free)
        print("smoothness selection (relative log likelihood): "
              + ", ".join(f"kappa={k:g}: {v:+.3f}" for k, v in rel.items())
              + f" -> kappa = {fit.params.kappa:g}")
    else:
        fit = fit_mcml(dataset, design, init_params=init, control=control,
                       seed=substream_seed(seed, "fit"), free=free)
    fit.save_json(out / "fit.json")
    for line in _fit_summary_lines(fit):
        print(line)
    if not fit.converged:
        print("warning: outer loop did not converge "
              f"(rel change {fit.rel_change:.4f}, gain {fit.final_loglik_gain:.4f})")


def cmd_bayes(config: dict, out: Path, base: Path, seed: int) -> None:
    dataset = _load_dataset(config, base)
    design = build_design(dataset, _model_terms(config))
    family = _model_family(config)
    bayes_cfg = config.get("bayes", {})
    if "priors" in bayes_cfg:
        priors = PriorSpec.from_dict(bayes_cfg["priors"])
    else:
        priors = PriorSpec.vague(design.p)
    control = McmcControl(**bayes_cfg.get("control", {}))
    init = None
    try:
        init = _init_params(config, out, family)
    except ValidationError:
        pass
    draws = fit_bayes(dataset, design, priors, control,
                      seed=substream_seed(seed, "bayes"), init_params=init)
    draws.save_csv(out / "bayes_chains.csv")
    draws.save_meta_json(out / "bayes_meta.json")
    np.save(out / "bayes_latent.npy", draws.latent_draws)
    print("Parameter     Post. mean    95% credible interval      ESS")
    for name, mean, lo, hi, ess in posterior_summaries(draws):
        print(f"{name:<12}  {mean:>8.3f}    ({lo:>8.3f}, {hi:>8.3f})   {ess:>7.0f}")


def _load_posterior(out: Path) -> PosteriorDraws:
    chains_path = out / "bayes_chains.csv"
    meta_path = out / "bayes_meta.json"
    latent_path = out / "bayes_latent.npy"
    if not (chains_path.exists() and meta_path.exists() and latent_path.exists()):
        raise ValidationError("no Bayesian artifacts found: run `bayes` first")
    with open(meta_path) as fh:
        meta = json.load(fh)
    lines = chains_path.read_text().splitlines()
    names = tuple(lines[0].split(","))
    chains = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    return PosteriorDraws(names=names, chains=chains,
                          latent_draws=np.load(latent_path),
                          acceptance=meta["acceptance"],
                          priors=PriorSpec.from_dict(meta["priors"]),
                          control=McmcControl(**meta["control"]), seed=meta["seed"],
                          p=len(names) - 4,
                          template=CorrelationParams.from_dict(meta["template"]))


def cmd_diagnose(config: dict, out: Path, base: Path, seed: int) -> None:
    dataset = _load_dataset(config, base)
    design = build_design(dataset, _model_terms(config))
    diag = config.get("diagnose", {})
    coords = dataset.coords
    u_edges, v_edges = _variogram_edges(config, coords)
    if diag.get("source", "fit") == "bayes":
        fit_obj = _load_posterior(out)
    else:
        fit_path = out / "fit.json"
        if not fit_path.exists():
            raise ValidationError("no fit.json found: run `fit` first")
        fit_obj = FittedModel.load_json(fit_path)
    envelope, gof = gof_simulation_test(
        fit_obj, dataset, design, u_edges, v_edges,
        b_replicates=int(diag.get("b_replicates", 500)),
        seed=substream_seed(seed, "gof"))
    envelope.save_json(out / "gof_envelope.json")
    envelope.plot_data_csv(out / "gof_envelope.csv")
    gof.save_json(out / "gof_test.json")
    print(f"goodness-of-fit p-value: {gof.p_value:.4f} (mode {gof.mode})")


def cmd_bootstrap(config: dict, out: Path, base: Path, seed: int, threads: int = 1) -> None:
    dataset = _load_dataset(config, base)
    design = build_design(dataset, _model_terms(config))
    fit_path = out / "fit.json"
    if not fit_path.exists():
        raise ValidationError("no fit.json found: run `fit` first")
    fit = FittedModel.load_json(fit_path)
    boot_cfg = config.get("bootstrap", {})
    control = McmlControl(**boot_cfg.get("control", {})) if "control" in boot_cfg else None
    boot = parametric_bootstrap(fit, dataset, design,
                                r_replicates=int(boot_cfg.get("r_replicates", 100)),
                                seed=substream_seed(seed, "bootstrap"),
                                parallelism=threads, control=control)
    boot.save_json(out / "bootstrap.json")
    for line in _fit_summary_lines(fit, boot):
        print(line)


def cmd_profile(config: dict, out: Path, base: Path, seed: int) -> None:
    dataset = _load_dataset(config, base)
    design = build_design(dataset, _model_terms(config))
    family = _model_family(config)
    init = _init_params(config, out, family)
    prof_cfg = config.get("profile", {})
    control = McmlControl(**prof_cfg.get("control", {}))
    grid = prof_cfg.get("xi_grid", [0.0, 0.25, 0.5, 0.75, 1.0])
    prof = profile_deviance_xi(dataset, design, xi_grid=grid, init_params=init,
                               control=control, seed=substream_seed(seed, "profile"))
    prof.save_json(out / "profile_xi.json")
    print(f"xi_hat = {prof.xi_hat:g}; deviance range "
          f"[{prof.deviance.min():.3f}, {prof.deviance.max():.3f}] vs chi2 reference "
          f"{prof.reference_95:.3f}")


def _prediction_grid(config: dict, base: Path) -> PredictionGrid:
    pred = config.get("predict", {})
    times = [float(t) for t in pred["times"]]
    region = None
    if "region" in pred:
        spec = pred["region"]
        polygons = load_region_polygons(_resolve(base, spec["path"]))
        region = polygons[spec["name"]] if "name" in spec else next(iter(polygons.values()))
    grid_cfg = pred.get("grid", {})
    if "csv" in grid_cfg:
        return grid_from_csv(_resolve(base, grid_cfg["csv"]),
                             cell_area=float(grid_cfg["cell_area"]), times=times, region=region)
    return grid_from_bbox(grid_cfg["bbox"], float(grid_cfg["resolution_km"]), times, region=region)


def cmd_predict(config: dict, out: Path, base: Path, seed: int) -> None:
    dataset = _load_dataset(config, base)
    design = build_design(dataset, _model_terms(config))
    pred = config.get("predict", {})
    tag = pred.get("mode", "plugin")
    if tag in ("plugin", "gaussian_approx"):
        fit_path = out / "fit.json"
        if not fit_path.exists():
            raise ValidationError("no fit.json found: run `fit` first")
        source = FittedModel.load_json(fit_path)
    elif tag == "bootstrap":
        boot_path = out / "bootstrap.json"
        if not boot_path.exists():
            raise ValidationError("no bootstrap.json found: run `bootstrap` first")
        source = BootstrapSet.load_json(boot_path)
    elif tag == "bayesian":
        source = _load_posterior(out)
    else:
        raise ValidationError(f"unknown prediction mode {tag!r}")
    mode = ParamUncertaintyMode(tag=tag, source=source)

    grid = _prediction_grid(config, base)
    bundle = conditional_simulate(mode, dataset, design, grid,
                                  target_covariates=pred.get("target_covariates", {}),
                                  b_pred=int(pred.get("b_pred", 1000)),
                                  seed=substream_seed(seed, "predict"))
    thresholds = [float(t) for t in pred.get("thresholds", [])]
    alphas = [float(a) for a in pred.get("alphas", [])]
    save_bundle(bundle, out / "bundle", thresholds=thresholds, alphas=alphas)

    if "districts" in pred:
        polygons = load_region_polygons(_resolve(base, pred["districts"]))
        with open(out / "districts.csv", "w", newline="") as fh:
            header = "district,time,mean,lower95,upper95"
            header += "".join(f",exceed_{t:g}" for t in thresholds)
            fh.write(header + "\n")
            for name in sorted(polygons):
                summary = district_average(bundle, polygons[name], district_id=name)
                exceed = [summary.exceedance(t) for t in thresholds]
                for k, t in enumerate(summary.times):
                    row = (f"{name},{t!r},{float(summary.mean[k])!r},"
                           f"{float(summary.lower95[k])!r},{float(summary.upper95[k])!r}")
                    row += "".join(f",{float(e[k])!r}" for e in exceed)
                    fh.write(row + "\n")
    print(f"bundle written: {bundle.mean.shape[1]} cells x {len(bundle.times)} times, "
          f"mode {tag}, B_pred {bundle.b_pred}")


def cmd_export_viewer(config: dict, out: Path, base: Path, seed: int) -> None:
    bundle_dir = out / "bundle"
    if not (bundle_dir / "bundle.json").exists():
        raise ValidationError("no bundle found under --out: run `predict` first")
    bundle = load_bundle(bundle_dir)
    if bundle.grid.raster is None:
        raise ValidationError("viewer export needs a regular raster grid")
    with open(bundle_dir / "bundle.json") as fh:
        header = json.load(fh)
    viewer = out / "viewer"
    viewer.mkdir(parents=True, exist_ok=True)

    raster = bundle.grid.raster
    nx, ny = raster["nx"], raster["ny"]
    layers = []
    ranges = {}

    def write_raster(target, s, values_active):
        full = np.full(bundle.grid.n_cells, np.nan, dtype=np.float32)
        full[bundle.grid.active_indices] = values_active
        fname = f"{target}_t{s}.bin"
        full.astype("<f4").tofile(viewer / fname)
        finite = full[np.isfinite(full)]
        lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
        layers.append({"target": target, "time_index": s, "time": bundle.times[s],
                       "path": fname, "min": lo, "max": hi})
        ranges.setdefault(target, [math.inf, -math.inf])
        ranges[target][0] = min(ranges[target][0], lo)
        ranges[target][1] = max(ranges[target][1], hi)

    sketch_layers = []
    for s in range(len(bundle.times)):
        write_raster("mean", s, bundle.mean[s])
        write_raster("sd", s, bundle.sd[s])
        full_sketch = np.full((bundle.grid.n_cells, 101), np.nan, dtype=np.float32)
        full_sketch[bundle.grid.active_indices] = bundle.sketch[s]
        fname = f"sketch_t{s}.bin"
        full_sketch.astype("<f4").tofile(viewer / fname)
        sketch_layers.append({"time_index": s, "time": bundle.times[s], "path": fname,
                              "shape": [bundle.grid.n_cells, 101]})
        for threshold in header.get("thresholds", []):
            write_raster(f"exceedance_{threshold:g}", s, bundle.exceedance(threshold)[s])
        for alpha in header.get("alphas", []):
            write_raster(f"quantile_{alpha:g}", s, bundle.quantile(alpha)[s])

    manifest = {
        "format": "prevmap-viewer-v1",
        "grid": {"nx": nx, "ny": ny, "x0": raster["x0"], "y0": raster["y0"],
                 "dx": raster["dx"], "dy": raster["dy"], "order": "row-major-y-outer"},
        "times": list(bundle.times),
        "mode": bundle.mode_tag,
        "seed": bundle.seed,
        "thresholds": header.get("thresholds", []),
        "alphas": header.get("alphas", []),
        "layers": layers,
        "sketch": sketch_layers,
        "fixed_ranges": {k: [v[0], v[1]] for k, v in sorted(ranges.items())},
        "districts": "districts.csv" if (out / "districts.csv").exists() else None,
    }
    if (out / "districts.csv").exists():
        (viewer / "districts.csv").write_bytes((out / "districts.csv").read_bytes())
    _json_dump(manifest, viewer / "manifest.json")
    print(f"viewer bundle: {len(layers)} raster layers, {len(sketch_layers)} sketches")


def cmd_serve(args) -> int:
    import functools
    import http.server
    directory = args.directory
    handler = functools.partial(http.server.SimpleHTTPRequestHandler, directory=directory)
    with http.server.ThreadingHTTPServer(("127.0.0.1", args.port), handler) as httpd:
        print(f"serving {directory} at http://127.0.0.1:{args.port}/")
        try:
            httpd.serve_forever()
        except KeyboardInterrupt:
            pass
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prevmap",
                                     description="Spatio-temporal prevalence mapping pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        if name == "serve":
            sp = sub.add_parser(name, help="serve a directory of static files")
            sp.add_argument("directory")
            sp.add_argument("--port", type=int, default=8765)
            continue
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config master seed")
        sp.add_argument("--threads", type=int, default=1,
                        help="cap on parallel workers")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        return cmd_serve(args)
    try:
        config = _load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        base = Path(args.config).resolve().parent
        seed = int(args.seed if args.seed is not None else config.get("seed", 0))
        handlers = {
            "simulate": cmd_simulate,
            "explore": cmd_explore,
            "fit": cmd_fit,
            "bayes": cmd_bayes,
            "diagnose": cmd_diagnose,
            "profile": cmd_profile,
            "predict": cmd_predict,
            "export-viewer": cmd_export_viewer,
        }
        if args.command == "bootstrap":
            cmd_bootstrap(config, out, base, seed, threads=args.threads)
        else:
            handlers[args.command](config, out, base, seed)
        _write_manifest(out, args.command, config, seed)
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, PrevmapError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: fit, simulate, dump-constraints.

Configuration comes from an optional TOML file plus flags; any flag
overrides the file.  Every output file records the sha256 hash of the
resolved configuration and the tool version, so a result can always be
traced back to the exact run that produced it.  Outputs are written only
after the run succeeds, and identical configs produce byte-identical
result files regardless of schema or worker count.

Exit codes: 0 success, 1 numeric failure, 2 configuration or data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

import numpy as np

from . import __version__
from .constraint import Smoothness, build_constraints
from .errors import ConfigurationError, PipelineError
from .model import BasisSpec, Link
from .partition import Partition, read_long_csv
from .pipeline import FitSettings, fit_pipeline, result_payload, write_curves_csv
from .qif import Correlation
from .simulate import SCENARIO_NAMES, make_scenario, run_mc

logger = logging.getLogger(__name__)

_ALLOWED_KEYS = {
    "data": {"path", "q", "p"},
    "partition": {"edges", "n_blocks", "block_width"},
    "basis": {"degrees", "scaled"},
    "model": {"link", "correlation"},
    "smoothing": {"smoothness", "lambda_grid"},
    "run": {"schema", "workers", "alpha", "grid_step", "output_dir"},
    "simulate": {
        "scenario",
        "reps",
        "seed",
        "full_scale",
        "n_subjects",
        "replicate_workers",
    },
}


def _csv_floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def load_config(path: str | None) -> dict:
    """Read and strictly validate a TOML config; unknown keys are errors."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid TOML: {exc}") from exc
    for section, body in cfg.items():
        if section not in _ALLOWED_KEYS:
            raise ConfigurationError(
                f"config file {path}: unknown section [{section}] "
                f"(known: {', '.join(sorted(_ALLOWED_KEYS))})"
            )
        if not isinstance(body, dict):
            raise ConfigurationError(f"config file {path}: [{section}] must be a table")
        for key in body:
            if key not in _ALLOWED_KEYS[section]:
                raise ConfigurationError(
                    f"config file {path}: unknown key {key!r} in [{section}] "
                    f"(known: {', '.join(sorted(_ALLOWED_KEYS[section]))})"
                )
    return cfg


def _pick(flag, cfg_value, default):
    if flag is not None:
        return flag
    if cfg_value is not None:
        return cfg_value
    return default


def _cfg(cfg: dict, section: str, key: str):
    return cfg.get(section, {}).get(key)


def config_hash(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"), default=repr)
    return hashlib.sha256(canon.encode()).hexdigest()


def _resolve_partition_spec(args, cfg) -> dict:
    edges = _pick(getattr(args, "edges", None), _cfg(cfg, "partition", "edges"), None)
    n_blocks = _pick(getattr(args, "n_blocks", None), _cfg(cfg, "partition", "n_blocks"), None)
    width = _pick(getattr(args, "block_width", None), _cfg(cfg, "partition", "block_width"), None)
    given = [spec for spec in (edges, n_blocks, width) if spec is not None]
    if len(given) != 1:
        raise ConfigurationError(
            "supply exactly one of --edges, --n-blocks, --block-width "
            f"(got {len(given)} of them)"
        )
    if edges is not None:
        return {"edges": [float(e) for e in edges]}
    if n_blocks is not None:
        return {"n_blocks": int(n_blocks)}
    return {"block_width": float(width)}


def _partition_from_spec(spec: dict, domain: tuple[float, float] | None) -> Partition:
    if "edges" in spec:
        return Partition(tuple(spec["edges"]))
    if domain is None:
        raise ConfigurationError(
            "a uniform-block partition needs the time domain; pass --domain lo,hi"
        )
    lo, hi = domain
    if "n_blocks" in spec:
        n = spec["n_blocks"]
        if n < 1:
            raise ConfigurationError(f"n_blocks must be >= 1, got {n}")
        return Partition(tuple(np.linspace(lo, hi, n + 1)))
    width = spec["block_width"]
    if width <= 0:
        raise ConfigurationError(f"block width must be positive, got {width}")
    n = max(1, int(np.ceil((hi - lo) / width - 1e-9)))
    edges = [lo + k * width for k in range(n)] + [hi]
    return Partition(tuple(edges))


def _resolve_model(args, cfg) -> dict:
    degrees = _pick(getattr(args, "degrees", None), _cfg(cfg, "basis", "degrees"), None)
    if degrees is None:
        raise ConfigurationError("basis degrees are required (--degrees or [basis] degrees)")
    scaled = _pick(getattr(args, "scaled", None), _cfg(cfg, "basis", "scaled"), True)
    smoothness = _pick(
        getattr(args, "smoothness", None), _cfg(cfg, "smoothing", "smoothness"), "c0"
    )
    return {
        "degrees": [int(d) for d in degrees],
        "scaled": bool(scaled),
        "smoothness": str(smoothness).lower(),
    }


def _make_writer(out_dir: str):
    os.makedirs(out_dir, exist_ok=True)

    def path_of(name: str) -> str:
        return os.path.join(out_dir, name)

    return path_of


def run_fit(args) -> int:
    cfg = load_config(args.config)
    path = _pick(args.data, _cfg(cfg, "data", "path"), None)
    if path is None:
        raise ConfigurationError("a data file is required (--data or [data] path)")
    q = int(_pick(args.q, _cfg(cfg, "data", "q"), 1))
    p = int(_pick(args.p, _cfg(cfg, "data", "p"), 0))
    part_spec = _resolve_partition_spec(args, cfg)
    model_spec = _resolve_model(args, cfg)
    if len(model_spec["degrees"]) != q:
        raise ConfigurationError(
            f"q={q} but {len(model_spec['degrees'])} basis degrees were given"
        )
    link = Link.parse(_pick(args.link, _cfg(cfg, "model", "link"), "identity"))
    corr = Correlation.parse(
        _pick(args.correlation, _cfg(cfg, "model", "correlation"), "independence")
    )
    lam_grid = _pick(args.lambda_grid, _cfg(cfg, "smoothing", "lambda_grid"), (0.0,))
    schema = int(_pick(args.schema, _cfg(cfg, "run", "schema"), 1))
    workers = int(_pick(args.workers, _cfg(cfg, "run", "workers"), 1))
    alpha = float(_pick(args.alpha, _cfg(cfg, "run", "alpha"), 0.05))
    grid_step = _pick(args.grid_step, _cfg(cfg, "run", "grid_step"), None)
    out_dir = _pick(args.output_dir, _cfg(cfg, "run", "output_dir"), ".")

    # schema and worker count are execution details: they may not change
    # any output byte, so they stay out of the hashed config
    resolved = {
        "command": "fit",
        "data": {"path": str(path), "q": q, "p": p},
        "partition": part_spec,
        "basis": {"degrees": model_spec["degrees"], "scaled": model_spec["scaled"]},
        "model": {"link": link.value, "correlation": corr.value},
        "smoothing": {
            "smoothness": model_spec["smoothness"],
            "lambda_grid": [float(l) for l in lam_grid],
        },
        "run": {
            "alpha": alpha,
            "grid_step": None if grid_step is None else float(grid_step),
        },
    }
    digest = config_hash(resolved)
    logger.info("fit: config hash %s (schema %d, workers %d)", digest, schema, workers)

    basis = BasisSpec(degrees=tuple(model_spec["degrees"]), scaled=model_spec["scaled"])
    smoothness = Smoothness.parse(model_spec["smoothness"])
    data = read_long_csv(path, q, p)
    domain = (float(np.min(data.times)), float(np.max(data.times)))
    part = _partition_from_spec(part_spec, domain)
    # fail on an inconsistent constraint setup before any fitting starts
    build_constraints(part, basis, p, smoothness)
    settings = FitSettings(
        part=part,
        basis=basis,
        link=link,
        n_scalar=p,
        corr=corr,
        smoothness=smoothness,
        lambda_grid=tuple(float(l) for l in lam_grid),
        schema=schema,
        workers=workers,
        alpha=alpha,
        grid_step=None if grid_step is None else float(grid_step),
    )
    result = fit_pipeline(data, settings)

    for fit in result.block_fits:
        logger.info(
            "block %d: converged=%s iterations=%d objective=%.6g",
            fit.block_index + 1,
            fit.converged,
            fit.iterations,
            fit.objective,
        )
    for row in result.fit.gcv_table:
        logger.info(
            "lambda=%g gcv=%s%s",
            row["lambda"],
            row["gcv"],
            "  <- selected" if row["selected"] else "",
        )
    logger.info("phase timings (s): %s", {k: round(v, 4) for k, v in result.timings.items()})

    path_of = _make_writer(out_dir)
    payload = result_payload(result, digest, __version__)
    with open(path_of("result.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    write_curves_csv(
        path_of("curves.csv"), result, {"config_hash": digest, "version": __version__}
    )
    logger.info("wrote %s and %s", path_of("result.json"), path_of("curves.csv"))
    return 0


def run_simulate(args) -> int:
    cfg = load_config(args.config)
    kind = _pick(args.scenario, _cfg(cfg, "simulate", "scenario"), None)
    if kind is None:
        raise ConfigurationError(
            f"a scenario is required (--scenario); available: {', '.join(SCENARIO_NAMES)}"
        )
    reps = int(_pick(args.reps, _cfg(cfg, "simulate", "reps"), 200))
    seed = int(_pick(args.seed, _cfg(cfg, "simulate", "seed"), 0))
    full_scale = bool(_pick(args.full_scale, _cfg(cfg, "simulate", "full_scale"), False))
    n_subjects = _pick(args.n_subjects, _cfg(cfg, "simulate", "n_subjects"), None)
    workers = int(_pick(args.workers, _cfg(cfg, "simulate", "replicate_workers"), 1))
    inner_workers = int(_pick(args.inner_workers, _cfg(cfg, "run", "workers"), 1))
    schema = int(_pick(args.schema, _cfg(cfg, "run", "schema"), 1))
    alpha = float(_pick(args.alpha, _cfg(cfg, "run", "alpha"), 0.05))
    out_dir = _pick(args.output_dir, _cfg(cfg, "run", "output_dir"), ".")

    resolved = {
        "command": "simulate",
        "simulate": {
            "scenario": str(kind),
            "reps": reps,
            "seed": seed,
            "full_scale": full_scale,
            "n_subjects": None if n_subjects is None else int(n_subjects),
        },
        "run": {"alpha": alpha},
    }
    digest = config_hash(resolved)
    logger.info(
        "simulate: config hash %s (schema %d, workers %d/%d)",
        digest,
        schema,
        workers,
        inner_workers,
    )

    scenario = make_scenario(
        str(kind),
        n_subjects=None if n_subjects is None else int(n_subjects),
        full_scale=full_scale,
    )
    report = run_mc(
        scenario,
        reps=reps,
        seed=seed,
        workers=workers,
        schema=schema,
        inner_workers=inner_workers,
        alpha=alpha,
    )
    logger.info(
        "simulate: %d/%d replicates ok, mean total %.3fs",
        report.reps - report.n_failed,
        report.reps,
        report.timing_mean.get("total", float("nan")),
    )

    path_of = _make_writer(out_dir)
    payload = {"version": __version__, "config_hash": digest, **report.to_dict()}
    with open(path_of("mc_report.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    with open(path_of("mc_report.txt"), "w") as fh:
        fh.write(f"# config_hash={digest}\n# version={__version__}\n")
        fh.write(report.format_table())
    timings = {"version": __version__, "config_hash": digest, **report.timings_dict()}
    with open(path_of("mc_timings.json"), "w") as fh:
        json.dump(timings, fh, indent=2)
        fh.write("\n")
    sys.stdout.write(report.format_table())
    return 0


def run_dump_constraints(args) -> int:
    cfg = load_config(args.config)
    p = int(_pick(args.p, _cfg(cfg, "data", "p"), 0))
    part_spec = _resolve_partition_spec(args, cfg)
    model_spec = _resolve_model(args, cfg)
    domain = getattr(args, "domain", None)
    out_dir = _pick(args.output_dir, _cfg(cfg, "run", "output_dir"), ".")

    resolved = {
        "command": "dump-constraints",
        "partition": part_spec,
        "domain": None if domain is None else [float(domain[0]), float(domain[1])],
        "basis": {"degrees": model_spec["degrees"], "scaled": model_spec["scaled"]},
        "smoothing": {"smoothness": model_spec["smoothness"]},
        "p": p,
    }
    digest = config_hash(resolved)

    basis = BasisSpec(degrees=tuple(model_spec["degrees"]), scaled=model_spec["scaled"])
    smoothness = Smoothness.parse(model_spec["smoothness"])
    part = _partition_from_spec(part_spec, None if domain is None else (domain[0], domain[1]))
    cmap = build_constraints(part, basis, p, smoothness)

    path_of = _make_writer(out_dir)
    meta = [f"# config_hash={digest}", f"# version={__version__}"]
    with open(path_of("constraints_H.csv"), "w") as fh:
        fh.write("\n".join(meta) + "\n")
        fh.write(f"# shape={cmap.H.shape[0]}x{cmap.H.shape[1]}\n")
        for row in cmap.H:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(path_of("constraints_Rtilde.csv"), "w") as fh:
        fh.write("\n".join(meta) + "\n")
        fh.write(f"# shape={cmap.Rtilde.shape[0]}x{cmap.Rtilde.shape[1]}\n")
        fh.write("# columns=" + ",".join(cmap.labels) + "\n")
        for row in cmap.Rtilde:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    sys.stdout.write(
        f"H: {cmap.H.shape[0]} rows (rank {cmap.rank_H}), theta dim {cmap.dim_theta}, "
        f"reduced dim {cmap.dim_theta_star}\n"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scmfit",
        description="Blockwise functional regression with smooth combination.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file; flags override it")
    common.add_argument("--output-dir", help="directory for output files (default .)")
    common.add_argument(
        "-v", "--verbose", action="count", default=0, help="increase log detail"
    )

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument(
        "--edges",
        type=_csv_floats,
        help="partition edges c0,c1,...,cJ (use --edges=-15,0,15 when c0 is negative)",
    )
    model_flags.add_argument("--n-blocks", type=int, help="uniform partition block count")
    model_flags.add_argument("--block-width", type=float, help="uniform partition block width")
    model_flags.add_argument("--degrees", type=_csv_ints, help="basis degree per covariate")
    model_flags.add_argument(
        "--scaled",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="use block-scaled basis coordinates (default on)",
    )
    model_flags.add_argument(
        "--smoothness", choices=["none", "c0", "c1"], help="continuity class at edges"
    )
    model_flags.add_argument("--p", type=int, help="number of scalar covariates")

    fit = sub.add_parser(
        "fit", parents=[common, model_flags], help="fit a model to a long-format CSV"
    )
    fit.add_argument("--data", help="input CSV (header id,time,y,x1..xq,z1..zp)")
    fit.add_argument("--q", type=int, help="number of functional covariates")
    fit.add_argument("--link", choices=["identity", "log"], help="mean link")
    fit.add_argument(
        "--correlation",
        choices=["independence", "ar1", "exchangeable"],
        help="working correlation family",
    )
    fit.add_argument("--lambda-grid", type=_csv_floats, help="smoothing weights to score")
    fit.add_argument("--schema", type=int, choices=[1, 2], help="selection parallel schema")
    fit.add_argument("--workers", type=int, help="worker process count")
    fit.add_argument("--alpha", type=float, help="CI level (default 0.05)")
    fit.add_argument("--grid-step", type=float, help="curve grid spacing (default: observed times)")
    fit.set_defaults(func=run_fit)

    sim = sub.add_parser("simulate", parents=[common], help="run a Monte Carlo study")
    sim.add_argument("--scenario", choices=list(SCENARIO_NAMES), help="scenario preset")
    sim.add_argument("--reps", type=int, help="replicate count (default 200)")
    sim.add_argument("--seed", type=int, help="base seed (default 0)")
    sim.add_argument(
        "--full-scale",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="full-size preset instead of desk scale",
    )
    sim.add_argument("--n-subjects", type=int, help="override scenario subject count")
    sim.add_argument("--schema", type=int, choices=[1, 2], help="selection parallel schema")
    sim.add_argument("--workers", type=int, help="replicate-level worker count")
    sim.add_argument("--inner-workers", type=int, help="pipeline workers inside each replicate")
    sim.add_argument("--alpha", type=float, help="CI level (default 0.05)")
    sim.set_defaults(func=run_simulate)

    dump = sub.add_parser(
        "dump-constraints",
        parents=[common, model_flags],
        help="write the constraint and reduction matrices",
    )
    dump.add_argument(
        "--domain", type=_csv_floats, help="time domain lo,hi for uniform partitions"
    )
    dump.set_defaults(func=run_dump_constraints)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.INFO if args.verbose == 0 else logging.DEBUG
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except PipelineError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

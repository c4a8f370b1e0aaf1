"""Monte Carlo studies: scenario presets, generators, replication harness.

Three stock scenarios exercise the pipeline end to end:

- ``broken-stick``: Gaussian outcomes, mean |t| on t in {-15..15},
  exchangeable errors, two linear blocks joined continuously at 0.
- ``known-cubic``: Gaussian outcomes whose mean curve is piecewise cubic
  with breaks at 20/40/60/80, AR(1) errors, one scalar covariate.  The
  curve is exactly representable by the fitted model, so estimates are
  unbiased and coverage should be nominal.
- ``poisson``: counts via a Gaussian copula with AR(1) latent errors and
  log-link mean exp{X beta1(t) + Z eta}.

Replicate r of a run with seed s draws from ``default_rng([s, r])``, so
any subset of replicates can be reproduced in isolation and worker
scheduling cannot change a single byte of the output.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .combine import normal_quantile
from .constraint import ConstraintMap, Smoothness, build_constraints
from .errors import ConfigurationError, NumericError, PipelineError
from .model import BasisSpec, Link
from .partition import LongData, Partition, from_balanced_arrays
from .pipeline import FitSettings, _pmap, fit_pipeline
from .qif import Correlation

SCENARIO_NAMES = ("broken-stick", "known-cubic", "poisson")

_POIS_ROOT2 = math.pi
_POIS_ROOT3 = 1438.0 * math.pi / 999.0
_POIS_SPAN = 4.522
# cap on exp(linear predictor) during generation; larger means the count
# draw itself is suspect, not merely slow
_POIS_MEAN_CAP = 1e12

# truncated-power coefficients of the known-cubic truth: (break, quadratic
# weight, cubic weight) on ((t - break)/20)_+^k
_CUBIC_KNOTS = ((20.0, 5.0, -2.0), (40.0, -3.0, -10.0), (60.0, 15.0, 20.0), (80.0, -10.0, 5.0))


def beta1_broken_stick(t: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(t, dtype=float))


def beta1_known_cubic(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    s = t / 20.0
    out = 1.0 + 2.0 * s - 3.0 * s**2 + 4.0 * s**3
    for knot, a2, a3 in _CUBIC_KNOTS:
        u = np.clip((t - knot) / 20.0, 0.0, None)
        out = out + a2 * u**2 + a3 * u**3
    return out


def beta1_poisson(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return 0.156 * (t * (t - _POIS_ROOT2) * (t - _POIS_ROOT3) + 1.84)


@dataclass(frozen=True)
class Scenario:
    """A fully specified data-generating design plus its fitting config."""

    kind: str
    n_subjects: int
    times: tuple[float, ...]
    edges: tuple[float, ...]
    degrees: tuple[int, ...]
    smoothness: Smoothness
    link: Link
    corr: Correlation
    lambda_grid: tuple[float, ...]
    rho: float
    sigma2: float
    error_corr: str
    eta: tuple[float, ...]
    scaled: bool = True

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def q(self) -> int:
        return len(self.degrees)

    @property
    def p(self) -> int:
        return len(self.eta)


def make_scenario(
    kind: str,
    n_subjects: int | None = None,
    full_scale: bool = False,
) -> Scenario:
    """Build a preset scenario; n_subjects overrides the preset size."""
    if kind == "broken-stick":
        return Scenario(
            kind=kind,
            n_subjects=n_subjects if n_subjects is not None else 1000,
            times=tuple(float(t) for t in range(-15, 16)),
            edges=(-15.0, 0.0, 15.0),
            degrees=(1,),
            smoothness=Smoothness.C0,
            link=Link.IDENTITY,
            corr=Correlation.EXCHANGEABLE,
            lambda_grid=(0.0,),
            rho=0.7,
            sigma2=10.0,
            error_corr="exchangeable",
            eta=(),
        )
    if kind == "known-cubic":
        return Scenario(
            kind=kind,
            n_subjects=n_subjects if n_subjects is not None else (1000 if full_scale else 500),
            times=tuple(float(t) for t in range(100)),
            edges=(0.0, 20.0, 40.0, 60.0, 80.0, 99.0),
            degrees=(3,),
            smoothness=Smoothness.C1,
            link=Link.IDENTITY,
            corr=Correlation.AR1,
            lambda_grid=tuple(10.0**k for k in range(-5, 0)),
            rho=0.8,
            sigma2=100.0,
            error_corr="ar1",
            eta=(6.0,),
        )
    if kind == "poisson":
        m = 1440 if full_scale else 144
        j = 15 if full_scale else 5
        return Scenario(
            kind=kind,
            n_subjects=n_subjects if n_subjects is not None else (3000 if full_scale else 300),
            times=tuple(np.linspace(0.0, _POIS_SPAN, m)),
            edges=tuple(np.linspace(0.0, _POIS_SPAN, j + 1)),
            degrees=(3,),
            smoothness=Smoothness.C1,
            link=Link.LOG,
            corr=Correlation.AR1,
            lambda_grid=tuple(10.0**k for k in range(-5, 0)),
            rho=0.8,
            sigma2=1.0,
            error_corr="ar1",
            eta=(0.5,),
        )
    raise ConfigurationError(
        f"unknown scenario {kind!r}; available: {', '.join(SCENARIO_NAMES)}"
    )


def beta_true(scenario: Scenario, t: np.ndarray) -> np.ndarray:
    if scenario.kind == "broken-stick":
        return beta1_broken_stick(t)
    if scenario.kind == "known-cubic":
        return beta1_known_cubic(t)
    return beta1_poisson(t)


def scenario_settings(
    scenario: Scenario,
    schema: int = 1,
    workers: int = 1,
    alpha: float = 0.05,
) -> FitSettings:
    return FitSettings(
        part=Partition(edges=scenario.edges),
        basis=BasisSpec(degrees=scenario.degrees, scaled=scenario.scaled),
        link=scenario.link,
        n_scalar=scenario.p,
        corr=scenario.corr,
        smoothness=scenario.smoothness,
        lambda_grid=scenario.lambda_grid,
        schema=schema,
        workers=workers,
        alpha=alpha,
    )


def scenario_constraints(scenario: Scenario) -> ConstraintMap:
    return build_constraints(
        Partition(edges=scenario.edges),
        BasisSpec(degrees=scenario.degrees, scaled=scenario.scaled),
        scenario.p,
        scenario.smoothness,
    )


def truth_theta(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Exact stacked and reduced parameter vectors for the true curve.

    Each block's coefficients come from interpolating the true curve at
    d+1 points in local coordinates; a residual check on a denser grid
    confirms the curve really is polynomial there.  The reduced vector
    must regenerate the full one, i.e. the truth satisfies the
    continuity constraints it is fitted under.
    """
    cmap = scenario_constraints(scenario)
    part = cmap.part
    degree = scenario.degrees[0]
    gammas = []
    for j in range(part.n_blocks):
        left, right = part.block_bounds(j)
        s = np.linspace(0.0, 1.0, degree + 1)
        t_nodes = left + s * (right - left) if scenario.scaled else left + s
        vand = np.vander(s if scenario.scaled else t_nodes - left, degree + 1, increasing=True)
        gamma = np.linalg.solve(vand, beta_true(scenario, t_nodes))
        s_dense = np.linspace(0.0, 1.0, 40)
        t_dense = left + s_dense * (right - left) if scenario.scaled else left + s_dense
        vand_dense = np.vander(
            s_dense if scenario.scaled else t_dense - left, degree + 1, increasing=True
        )
        resid = np.max(np.abs(vand_dense @ gamma - beta_true(scenario, t_dense)))
        if resid > 1e-8:
            raise ConfigurationError(
                f"true curve is not degree-{degree} polynomial on block {j + 1} "
                f"(residual {resid:.2e})"
            )
        gammas.append(gamma)
    theta = np.concatenate(gammas + [np.asarray(scenario.eta, dtype=float)])
    theta_star = cmap.reduce(theta)
    back = cmap.expand(theta_star)
    if not np.allclose(back, theta, atol=1e-9, rtol=0.0):
        raise ConfigurationError("true curve violates the requested smoothness constraints")
    return theta, theta_star


def _exchangeable_noise(rng: np.random.Generator, n: int, m: int, rho: float) -> np.ndarray:
    common = rng.standard_normal((n, 1))
    idio = rng.standard_normal((n, m))
    return math.sqrt(rho) * common + math.sqrt(1.0 - rho) * idio


def _ar1_noise(rng: np.random.Generator, n: int, m: int, rho: float) -> np.ndarray:
    z = rng.standard_normal((n, m))
    if m == 0 or rho == 0.0:
        return z
    e = np.empty_like(z)
    e[:, 0] = z[:, 0]
    scale = math.sqrt(1.0 - rho * rho)
    for t in range(1, m):
        e[:, t] = rho * e[:, t - 1] + scale * z[:, t]
    return e


def _draw_noise(rng: np.random.Generator, scenario: Scenario) -> np.ndarray:
    n, m = scenario.n_subjects, scenario.n_times
    if scenario.error_corr == "exchangeable":
        return _exchangeable_noise(rng, n, m, scenario.rho)
    return _ar1_noise(rng, n, m, scenario.rho)


def generate(scenario: Scenario, seed: int, rep: int) -> LongData:
    """One replicate of balanced data.  Draw order is fixed (X, Z, noise)
    so the stream layout is part of the determinism contract."""
    if seed < 0 or rep < 0:
        raise ConfigurationError("seed and replicate index must be >= 0")
    rng = np.random.default_rng([seed, rep])
    n, m = scenario.n_subjects, scenario.n_times
    times = np.asarray(scenario.times, dtype=float)

    if scenario.kind == "broken-stick":
        x = np.ones((n, m, 1))
    elif scenario.kind == "known-cubic":
        x = rng.standard_normal((n, m, 1))
    else:
        x = rng.uniform(0.5, 5.0, size=(n, m, 1))
    if scenario.p:
        z = (rng.random((n, m, scenario.p)) < 0.5).astype(float)
    else:
        z = np.zeros((n, m, 0))

    beta = beta_true(scenario, times)
    lin = x[:, :, 0] * beta[None, :]
    if scenario.p:
        lin = lin + z @ np.asarray(scenario.eta)

    if scenario.link is Link.IDENTITY:
        noise = _draw_noise(rng, scenario)
        y = lin + math.sqrt(scenario.sigma2) * noise
    else:
        latent = _draw_noise(rng, scenario)
        mu = np.exp(lin)
        if np.max(mu) > _POIS_MEAN_CAP:
            raise ConfigurationError(
                f"count mean overflow: max exp(predictor) = {np.max(mu):.3e}"
            )
        u = np.clip(stats.norm.cdf(latent), 1e-300, 1.0 - 1e-16)
        y = stats.poisson.ppf(u, mu)
    return from_balanced_arrays(y, x, z, times)


@dataclass
class ReplicateResult:
    rep: int
    ok: bool
    message: str = ""
    theta_star: np.ndarray | None = None
    se: np.ndarray | None = None
    hits: np.ndarray | None = None
    curve_hits: np.ndarray | None = None
    lam: float = float("nan")
    timings: dict[str, float] = field(default_factory=dict)


def run_replicate(
    scenario: Scenario,
    rep: int,
    seed: int,
    schema: int = 1,
    inner_workers: int = 1,
    alpha: float = 0.05,
) -> ReplicateResult:
    """Generate, fit, and score one replicate.  Numeric failures are
    reported, not raised; the harness tallies them."""
    try:
        data = generate(scenario, seed, rep)
        settings = scenario_settings(scenario, schema=schema, workers=inner_workers, alpha=alpha)
        result = fit_pipeline(data, settings)
        _, theta_star_true = truth_theta(scenario)
        fit = result.fit
        z = normal_quantile(alpha)
        hits = np.abs(fit.theta_star - theta_star_true) <= z * fit.theta_star_se
        curve = result.curves[0]
        truth_curve = beta_true(scenario, result.curve_grid)
        curve_hits = (curve["lower"] <= truth_curve) & (truth_curve <= curve["upper"])
        return ReplicateResult(
            rep=rep,
            ok=True,
            theta_star=fit.theta_star,
            se=fit.theta_star_se,
            hits=hits,
            curve_hits=curve_hits,
            lam=fit.lam,
            timings=result.timings,
        )
    except (PipelineError, np.linalg.LinAlgError) as exc:
        return ReplicateResult(rep=rep, ok=False, message=f"{type(exc).__name__}: {exc}")


@dataclass
class McReport:
    """Aggregated Monte Carlo results.

    Timing summaries live in a separate accessor so the main payload is
    byte-identical across reruns and worker counts.
    """

    scenario: str
    n_subjects: int
    reps: int
    n_failed: int
    seed: int
    schema: int
    labels: tuple[str, ...]
    truth: np.ndarray
    mean_estimate: np.ndarray
    bias: np.ndarray
    ase: np.ndarray
    ese: np.ndarray | None
    rase: np.ndarray
    cp: np.ndarray
    curve_times: np.ndarray
    curve_cp: np.ndarray
    curve_cp_avg: float
    eta_cp: float | None
    lambda_counts: dict[float, int]
    failures: list[str]
    timing_mean: dict[str, float]
    timing_sd: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "n_subjects": self.n_subjects,
            "reps": self.reps,
            "n_failed": self.n_failed,
            "seed": self.seed,
            "labels": list(self.labels),
            "truth": self.truth.tolist(),
            "mean_estimate": self.mean_estimate.tolist(),
            "bias": self.bias.tolist(),
            "ase": self.ase.tolist(),
            "ese": None if self.ese is None else self.ese.tolist(),
            "rase": [None if not np.isfinite(v) else v for v in self.rase],
            "cp": self.cp.tolist(),
            "curve_times": self.curve_times.tolist(),
            "curve_cp": self.curve_cp.tolist(),
            "curve_cp_avg": self.curve_cp_avg,
            "eta_cp": self.eta_cp,
            "lambda_counts": {repr(k): v for k, v in sorted(self.lambda_counts.items())},
            "failures": list(self.failures),
        }

    def timings_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "schema": self.schema,
            "mean_seconds": self.timing_mean,
            "sd_seconds": self.timing_sd,
        }

    def format_table(self) -> str:
        """Text table with the usual scaled columns."""
        lines = [
            f"scenario={self.scenario}  N={self.n_subjects}  reps={self.reps}  "
            f"failed={self.n_failed}  seed={self.seed}",
            "",
            f"{'parameter':<16}{'truth':>10}{'Bias x1e-2':>12}{'ASE x1e-2':>11}"
            f"{'ESE x1e-2':>11}{'RASE x1e-3':>12}{'CP':>8}",
        ]
        for k, label in enumerate(self.labels):
            ese = "--" if self.ese is None else f"{self.ese[k] * 100:.2f}"
            rase = "--" if not np.isfinite(self.rase[k]) else f"{self.rase[k] * 1000:.2f}"
            lines.append(
                f"{label:<16}{self.truth[k]:>10.3f}{self.bias[k] * 100:>12.2f}"
                f"{self.ase[k] * 100:>11.2f}{ese:>11}{rase:>12}{self.cp[k]:>8.3f}"
            )
        lines.append("")
        lines.append(f"beta1(t) pointwise CP, time-averaged: {self.curve_cp_avg:.3f}")
        if self.eta_cp is not None:
            lines.append(f"eta CP: {self.eta_cp:.3f}")
        counts = "  ".join(f"{lam:g}:{c}" for lam, c in sorted(self.lambda_counts.items()))
        lines.append(f"lambda selections: {counts}")
        if self.n_failed:
            lines.append(f"failed replicates: {self.n_failed}")
        return "\n".join(lines) + "\n"


def _mc_task(args) -> ReplicateResult:
    scenario, rep, seed, schema, inner_workers, alpha = args
    return run_replicate(scenario, rep, seed, schema=schema, inner_workers=inner_workers, alpha=alpha)


def run_mc(
    scenario: Scenario,
    reps: int,
    seed: int,
    workers: int = 1,
    schema: int = 1,
    inner_workers: int = 1,
    alpha: float = 0.05,
) -> McReport:
    """Run `reps` replicates (concurrently when workers > 1) and aggregate.

    The worker budget is not shared: replicate-level workers and the
    per-replicate pipeline workers are configured independently, and the
    default keeps each replicate serial to avoid oversubscription.
    """
    if reps < 1:
        raise ConfigurationError(f"reps must be >= 1, got {reps}")
    tasks = [(scenario, rep, seed, schema, inner_workers, alpha) for rep in range(reps)]
    results = _pmap(_mc_task, tasks, workers)
    return aggregate(scenario, results, seed=seed, schema=schema)


def aggregate(
    scenario: Scenario,
    results: list[ReplicateResult],
    seed: int,
    schema: int,
) -> McReport:
    """Fold replicate results into a report.  Input order is irrelevant:
    results are sorted by replicate index first."""
    results = sorted(results, key=lambda r: r.rep)
    reps = len(results)
    failed = [r for r in results if not r.ok]
    ok = [r for r in results if r.ok]
    if len(failed) > 0.05 * reps:
        detail = "; ".join(f"rep {r.rep}: {r.message}" for r in failed[:5])
        raise NumericError(
            f"{len(failed)}/{reps} replicates failed (> 5% threshold): {detail}"
        )
    if not ok:
        raise NumericError("all replicates failed")

    cmap = scenario_constraints(scenario)
    _, truth = truth_theta(scenario)
    ests = np.stack([r.theta_star for r in ok])
    ses = np.stack([r.se for r in ok])
    hits = np.stack([r.hits for r in ok])
    curve_hits = np.stack([r.curve_hits for r in ok])

    mean_est = ests.mean(axis=0)
    bias = mean_est - truth
    ase = ses.mean(axis=0)
    ese = ests.std(axis=0, ddof=1) if len(ok) >= 2 else None
    with np.errstate(divide="ignore", invalid="ignore"):
        rase = np.where(np.abs(mean_est) > 1e-12, ase / mean_est, np.nan)
    cp = hits.mean(axis=0)

    curve_times = np.unique(np.asarray(scenario.times, dtype=float))
    curve_cp = curve_hits.mean(axis=0)
    curve_cp_avg = float(curve_cp.mean())

    eta_cp = None
    if scenario.p:
        eta_idx = np.arange(cmap.dim_theta_star - scenario.p, cmap.dim_theta_star)
        eta_cp = float(cp[eta_idx].mean())

    lambda_counts = dict(Counter(r.lam for r in ok))

    phases = sorted({k for r in ok for k in r.timings})
    timing_mean = {}
    timing_sd = {}
    for phase in phases:
        vals = np.array([r.timings.get(phase, 0.0) for r in ok])
        timing_mean[phase] = float(vals.mean())
        timing_sd[phase] = float(vals.std(ddof=1)) if len(vals) >= 2 else 0.0
    totals = np.array([sum(r.timings.values()) for r in ok])
    timing_mean["total"] = float(totals.mean())
    timing_sd["total"] = float(totals.std(ddof=1)) if len(totals) >= 2 else 0.0

    return McReport(
        scenario=scenario.kind,
        n_subjects=scenario.n_subjects,
        reps=reps,
        n_failed=len(failed),
        seed=seed,
        schema=schema,
        labels=cmap.labels,
        truth=truth,
        mean_estimate=mean_est,
        bias=bias,
        ase=ase,
        ese=ese,
        rase=rase,
        cp=cp,
        curve_times=curve_times,
        curve_cp=curve_cp,
        curve_cp_avg=curve_cp_avg,
        eta_cp=eta_cp,
        lambda_counts=lambda_counts,
        failures=[f"rep {r.rep}: {r.message}" for r in failed],
        timing_mean=timing_mean,
        timing_sd=timing_sd,
    )

"""Scenario runner: parse a TOML config, dispatch, write artifacts.

Exit codes: 0 on success, 2 when a verification-style check failed (the math
said no), 1 on any usage or runtime error (the program said no).  Artifacts
are deterministic for a fixed config and seed, so manifests can be compared
checksum by checksum across reruns.
"""

import argparse
import hashlib
import json
import os
import sys
import time

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__
from .errors import UsageError
from .measures import EmpiricalMeasure, GridSpec
from .coefficients import BUILDERS


# ---------------------------------------------------------------------------
# model registry: named kernel sets per builder kind


def _ones_sigma(t, x, y):
    return np.ones(np.broadcast(x, y).shape[:-1] + (1, 1))


def _make_named_model(kind, name, params):
    import numpy as np

    from .coefficients import (make_first_order, make_n_order,
                               make_polynomial, make_scalar)

    if kind == "first_order":
        if name == "heat":
            return make_first_order(
                lambda t, x, y: np.zeros(np.broadcast(x, y).shape),
                _ones_sigma, name="heat")
        if name == "ou":
            rate = params.get("rate", 1.0)
            return make_first_order(lambda t, x, y: -rate * x + 0.0 * y,
                                    _ones_sigma, name="ou")
        if name == "attraction":
            return make_first_order(lambda t, x, y: y - x, _ones_sigma,
                                    name="attraction")
        if name == "const_drift":
            beta = params.get("beta", 0.5)
            return make_first_order(lambda t, x, y: beta + 0.0 * (x + y),
                                    _ones_sigma, name="const_drift")
        if name == "sine_diffusion":
            amp = params.get("amplitude", 0.1)
            return make_first_order(
                lambda t, x, y: np.zeros(np.broadcast(x, y).shape),
                lambda t, x, y: np.sqrt(1.0 + amp * np.sin(x))[..., None]
                + 0.0 * y[..., None],
                name="sine_diffusion")
    if kind == "scalar":
        if name == "mean_field_ou":
            return make_scalar(
                psis=[lambda y: y[:, 0]],
                phis=[lambda y: np.zeros(y.shape[0])],
                bouter=lambda t, x, z: z[0] - x,
                souter=lambda t, x, z: np.ones(x.shape[:-1] + (1, 1)),
                name="mean_field_ou")
        if name == "sin_stat_diffusion":
            return make_scalar(
                psis=[lambda y: y[:, 0]],
                phis=[lambda y: np.sin(y[:, 0])],
                bouter=lambda t, x, z: np.zeros(x.shape[:-1] + (1,)),
                souter=lambda t, x, z: np.full(
                    x.shape[:-1] + (1, 1), 1.0 + z[0] ** 2 / (2.0 + z[0] ** 2)),
                name="sin_stat_diffusion")
    if kind == "n_order":
        if name == "pair_product":
            return make_n_order(
                2, lambda t, x, ys: (ys[0] * ys[1]) + 0.0 * x,
                lambda t, x, ys: np.ones(np.broadcast(x, ys[0]).shape[:-1] + (1, 1)),
                name="pair_product")
    if kind == "polynomial":
        if name == "product_means":
            return make_polynomial(
                hbars_b=[lambda t, x, y: y[..., 0] + 0.0 * x[..., 0]] * 2,
                hbars_sigma=[lambda t, x, y: np.ones(np.broadcast(x, y).shape[:-1])],
                name="product_means")
    raise UsageError(
        f"unknown model {kind}/{name}; kinds: {sorted(BUILDERS)}, named models: "
        "heat, ou, attraction, const_drift, sine_diffusion (first_order); "
        "mean_field_ou, sin_stat_diffusion (scalar); pair_product (n_order); "
        "product_means (polynomial)")


def _make_measure(spec):
    kind = spec.get("kind", "dirac")
    if kind == "dirac":
        return EmpiricalMeasure.dirac(np.asarray(spec.get("point", [0.0]),
                                                 dtype=float))
    if kind == "gaussian_atoms":
        mean = float(spec.get("mean", 0.0))
        std = float(spec.get("std", 1.0))
        n = int(spec.get("atoms", 128))
        from scipy.stats import norm

        q = (np.arange(n) + 0.5) / n
        return EmpiricalMeasure((mean + std * norm.ppf(q))[:, None])
    if kind == "two_point":
        pts = np.asarray(spec.get("points", [-1.0, 1.0]), dtype=float)[:, None]
        return EmpiricalMeasure(pts)
    raise UsageError(f"unknown measure kind {kind!r}")


# ---------------------------------------------------------------------------
# scenario configuration


class ScenarioConfig:
    KINDS = ("density", "picard", "simulate", "pde", "verify", "lions")

    def __init__(self, raw):
        self.raw = raw
        self.scenario = raw.get("scenario")
        if self.scenario not in self.KINDS:
            raise UsageError(f"scenario must be one of {self.KINDS}, "
                             f"got {self.scenario!r}")
        model_spec = raw.get("model", {})
        self.model_kind = model_spec.get("kind", "first_order")
        if self.model_kind not in BUILDERS:
            raise UsageError(f"unknown model kind {self.model_kind!r}; "
                             f"valid: {sorted(BUILDERS)}")
        self.model_name = model_spec.get("name", "heat")
        self.model_params = model_spec.get("params", {})
        self.params = raw.get("params", {})
        self.seed = raw.get("seed")
        if self.scenario in ("simulate", "picard", "pde") and self.seed is None:
            raise UsageError(f"scenario {self.scenario!r} is stochastic: "
                             "a seed is required")
        self.mu0 = raw.get("mu0", {"kind": "dirac", "point": [0.0]})

    def build_model(self):
        return _make_named_model(self.model_kind, self.model_name,
                                 self.model_params)

    def build_mu0(self):
        return _make_measure(self.mu0)


def load_config(path):
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return ScenarioConfig(raw)


# ---------------------------------------------------------------------------
# manifest


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    def __init__(self, config_echo, version, phases, files, passed=True):
        self.config_echo = config_echo
        self.version = version
        self.phases = phases
        self.files = files
        self.passed = passed

    def as_dict(self):
        return {"config": self.config_echo, "version": self.version,
                "phases": self.phases, "files": self.files,
                "passed": self.passed}

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2)


def _version_string():
    base = f"mvsde-{__version__}"
    try:
        import subprocess

        desc = subprocess.run(["git", "describe", "--always", "--dirty"],
                              capture_output=True, text=True, timeout=5)
        if desc.returncode == 0:
            return f"{base}+{desc.stdout.strip()}"
    except Exception:
        pass
    return base


# ---------------------------------------------------------------------------
# scenario handlers (each returns (files, passed))


def _default_grid_from_params(params):
    lo = float(params.get("grid_lo", -8.0))
    hi = float(params.get("grid_hi", 8.0))
    n = int(params.get("grid_cells", 513))
    return GridSpec.from_bounds([lo], [hi], [n])


def _build_flow(model, mu0, params, seed):
    from .measures import MeasureFlow
    from .picard import PicardConfig, picard_solve

    horizon = float(params.get("horizon", 0.5))
    if params.get("flow", "picard") == "constant":
        times = np.linspace(0.0, horizon, int(params.get("time_steps", 16)) + 1)
        return MeasureFlow.constant(times, mu0)
    cfg = PicardConfig(horizon=horizon,
                       time_steps=int(params.get("time_steps", 16)),
                       mu0=mu0, tol=float(params.get("picard_tol", 1e-4)),
                       max_iters=int(params.get("max_iters", 25)),
                       grid_cells=int(params.get("flow_grid_cells", 512)),
                       seed=seed or 0)
    flow, _ = picard_solve(model, cfg)
    return flow


def _run_density(cfg, out_dir):
    from .parametrix import ParametrixConfig, ProxySpec, density_series

    model = cfg.build_model()
    mu0 = cfg.build_mu0()
    p = cfg.params
    grid = _default_grid_from_params(p)
    flow = _build_flow(model, mu0, p, cfg.seed)
    pc = ParametrixConfig(int(p.get("truncation", 3)),
                          int(p.get("time_quad_nodes", 12)), grid,
                          renormalize=bool(p.get("renormalize", True)),
                          cache_mb=_cache_mb())
    spec = ProxySpec(model, flow, 0.0)
    dens = density_series(spec, float(p.get("t", p.get("horizon", 0.5))),
                          float(p.get("x", 0.0)), pc)
    files = {}
    dens.to_csv(os.path.join(out_dir, "density.csv"),
                os.path.join(out_dir, "density_provenance.json"))
    files["density.csv"] = None
    files["density_provenance.json"] = None
    return files, True


def _run_picard(cfg, out_dir):
    from .picard import PicardConfig, fitted_contraction_ratio, picard_solve

    model = cfg.build_model()
    mu0 = cfg.build_mu0()
    p = cfg.params
    nu = _make_measure(cfg.raw["nu"]) if "nu" in cfg.raw else None
    pcfg = PicardConfig(horizon=float(p.get("horizon", 0.25)),
                        time_steps=int(p.get("time_steps", 16)), mu0=mu0,
                        nu=nu, tol=float(p.get("tol", 1e-6)),
                        max_iters=int(p.get("max_iters", 25)),
                        grid_cells=int(p.get("grid_cells", 512)),
                        seed=cfg.seed or 0)
    flow, history = picard_solve(model, pcfg)
    ratios = history[-1].contraction_ratios
    payload = {"iterations": [st.as_dict() for st in history],
               "fitted_ratio": fitted_contraction_ratio(history),
               "all_ratios_below_one": bool(all(r < 1.0 for r in ratios))}
    with open(os.path.join(out_dir, "picard_history.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    flow.states[-1].to_csv(os.path.join(out_dir, "terminal_density.csv"))
    files = {"picard_history.json": None, "terminal_density.csv": None}
    return files, payload["all_ratios_below_one"]


def _run_simulate(cfg, out_dir):
    from .simulate import SimConfig, euler_mv, sorted_mean, sorted_variance

    model = cfg.build_model()
    mu0 = cfg.build_mu0()
    p = cfg.params
    sim = SimConfig(int(p.get("n_particles", 10_000)),
                    float(p.get("dt", 1e-3)),
                    float(p.get("horizon", 1.0)), seed=cfg.seed,
                    interaction_cap=int(p.get("interaction_cap", 2048)))
    ens = euler_mv(model, mu0, sim)
    ens.to_binary(os.path.join(out_dir, "ensemble"))
    xT = ens.states[-1][:, 0]
    stats = {"terminal_mean": sorted_mean(xT),
             "terminal_variance": sorted_variance(xT),
             "n_particles": sim.n_particles, "seed": sim.seed}
    with open(os.path.join(out_dir, "stats.json"), "w") as fh:
        json.dump(stats, fh, indent=2)
    return {"ensemble.bin": None, "ensemble.json": None, "stats.json": None}, True


def _run_pde(cfg, out_dir):
    from .parametrix import ParametrixConfig
    from .pde import CauchyData, SolveConfig, solve_U
    from .simulate import SimConfig

    model = cfg.build_model()
    mu0 = cfg.build_mu0()
    p = cfg.params
    grid = _default_grid_from_params(p)
    flow = _build_flow(model, mu0, p, cfg.seed)
    case = p.get("case", "quadratic_terminal")
    if case == "quadratic_terminal":
        data = CauchyData(lambda t, x, m: np.zeros(x.shape[0]),
                          lambda x, m: x[:, 0] ** 2, alpha=0.0, q=1.0)
    elif case == "unit_source":
        data = CauchyData(lambda t, x, m: np.ones(x.shape[0]),
                          lambda x, m: np.zeros(x.shape[0]), alpha=0.0, q=1.0)
    elif case == "second_moment_terminal":
        data = CauchyData(lambda t, x, m: np.zeros(x.shape[0]),
                          lambda x, m: np.full(x.shape[0], m.moment2()),
                          alpha=0.0, q=1.0)
    else:
        raise UsageError(f"unknown pde case {case!r}")
    pc = ParametrixConfig(int(p.get("truncation", 1)),
                          int(p.get("time_quad_nodes", 12)), grid,
                          cache_mb=_cache_mb())
    t_eval = float(p.get("t", 0.0))
    x_eval = float(p.get("x", 0.0))
    quad = solve_U(model, data, flow, t_eval, [x_eval], mu0,
                   SolveConfig("parametrix_quadrature", pcfg=pc))
    mc = solve_U(model, data, flow, t_eval, [x_eval], mu0,
                 SolveConfig("monte_carlo",
                             sim=SimConfig(int(p.get("mc_paths", 20_000)),
                                           float(p.get("dt", 1e-3)),
                                           flow.t1 - t_eval, seed=cfg.seed)))
    gap = abs(quad.value - mc.value)
    tol = 3.0 * (quad.error_estimate + mc.error_estimate) + 1e-3
    payload = {"quadrature": {"value": quad.value, "error": quad.error_estimate},
               "monte_carlo": {"value": mc.value, "error": mc.error_estimate},
               "gap": gap, "agreement": bool(gap <= tol)}
    with open(os.path.join(out_dir, "pde_report.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    return {"pde_report.json": None}, payload["agreement"]


def _run_verify(cfg, out_dir):
    from .kernels import hermite_decay_sup, spacetime_sup
    from .coefficients import validate_assumptions
    from .measures import MeasureFlow
    from .parametrix import (ParametrixConfig, ProxySpec, density_series,
                             verify_derivative_scaling, verify_gaussian_bound)

    model = cfg.build_model()
    mu0 = cfg.build_mu0()
    p = cfg.params
    grid = _default_grid_from_params(p)
    samples = [(0.0, [x]) for x in np.linspace(-2, 2, 9)]
    assumption = validate_assumptions(model, samples, [mu0])
    xs = np.linspace(-10, 10, 41)[:, None]
    ts = np.geomspace(0.01, 1.0, 9)
    st_sups = spacetime_sup(2, 1.0, ts, xs)
    st_vals = np.array(list(st_sups.values()))
    st_ok = bool(np.isfinite(st_vals).all()
                 and st_vals.max() / max(st_vals.min(), 1e-300) <= 1.5)
    hd_vals = np.array(list(hermite_decay_sup(1.0, ts, xs).values()))
    hd_ok = bool(np.isfinite(hd_vals).all()
                 and hd_vals.max() / max(hd_vals.min(), 1e-300) <= 2.0)
    flow = MeasureFlow.constant(np.linspace(0, 1.0, 9), mu0)
    spec = ProxySpec(model, flow, 0.0)
    pc = ParametrixConfig(int(p.get("truncation", 2)),
                          int(p.get("time_quad_nodes", 12)), grid,
                          renormalize=False, cache_mb=_cache_mb())
    taus = [float(v) for v in p.get("taus", [0.05, 0.125, 0.25, 0.5])]
    densities = [density_series(spec, tau, float(p.get("x", 0.0)), pc)
                 for tau in taus]
    gauss = verify_gaussian_bound(densities,
                                  p.get("c_grid", [1.5, 2.0, 3.0]),
                                  eta=assumption.holder_eta_a)
    scal = {}
    for n in (1, 2):
        rep = verify_derivative_scaling(spec, pc, n, taus,
                                        x0=float(p.get("x", 0.0)))
        scal[n] = rep
    payload = {"assumptions": assumption.as_dict(),
               "spacetime_inequality": {"passed": st_ok},
               "hermite_decay": {"passed": hd_ok},
               "gaussian_bound": gauss.as_dict(),
               "derivative_scaling": {str(n): r.as_dict()
                                      for n, r in scal.items()}}
    passed = bool(all(assumption.passed.values()) and st_ok and hd_ok
                  and gauss.passed and all(r.passed for r in scal.values()))
    payload["passed"] = passed
    with open(os.path.join(out_dir, "verify_report.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    return {"verify_report.json": None}, passed


def _run_lions(cfg, out_dir):
    from .lions import (FUNCTIONALS, FlowComposition, check_flat_lions_relation,
                        composed_flow_derivative)
    from .parametrix import ParametrixConfig

    model = cfg.build_model()
    p = cfg.params
    rng = np.random.default_rng(cfg.seed or 0)
    mu = EmpiricalMeasure(rng.normal(size=(int(p.get("atoms", 64)), 1)))
    ys = [(-1.0,), (0.0,), (0.5,), (1.7,)]
    relation = {}
    for name in p.get("functionals",
                      ["sin_mean", "second_moment", "mean_squared",
                       "scalar_stat"]):
        h = FUNCTIONALS[name]()
        relation[name] = check_flat_lions_relation(h, mu, ys)
    tol = float(p.get("relation_tol", 1e-4))
    rel_ok = bool(max(relation.values()) <= tol)
    payload = {"relation_errors": relation, "relation_tol": tol,
               "relation_passed": rel_ok}
    if p.get("composed", True):
        grid = GridSpec.from_bounds([-10.0], [10.0], [513])
        pc = ParametrixConfig(1, 8, grid, cache_mb=_cache_mb())
        horizon_end = float(p.get("horizon", 1.0))
        fc = FlowComposition(FUNCTIONALS["sin_mean"](), model, horizon_end, pc)
        mu_small = EmpiricalMeasure(rng.normal(size=(16, 1)) * 0.7)
        rows = []
        for y in (0.0, 0.8):
            got = composed_flow_derivative(fc, 0.0, mu_small, y, n=0)
            rows.append({"y": y, "value": got,
                         "heat_reference": float(np.exp(-horizon_end / 2.0)
                                                 * np.cos(y))})
        payload["composed_flow"] = rows
    passed = rel_ok
    payload["passed"] = passed
    with open(os.path.join(out_dir, "lions_report.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    return {"lions_report.json": None}, passed


_HANDLERS = {"density": _run_density, "picard": _run_picard,
             "simulate": _run_simulate, "pde": _run_pde,
             "verify": _run_verify, "lions": _run_lions}


def _cache_mb():
    return float(os.environ.get("MV_PARAMETRIX_CACHE_MB", "512"))


def run_scenario(config_path, out_dir=None, seed=None, verify_strict=False):
    """Execute one scenario and write its manifest; returns the manifest."""
    cfg = load_config(config_path)
    if seed is not None:
        cfg.seed = int(seed)
        cfg.raw["seed"] = int(seed)
    out_dir = out_dir or cfg.raw.get("out", "results")
    os.makedirs(out_dir, exist_ok=True)
    phases = {}
    t0 = time.time()
    files, passed = _HANDLERS[cfg.scenario](cfg, out_dir)
    phases[cfg.scenario] = time.time() - t0
    file_table = {}
    for name in files:
        path = os.path.join(out_dir, name)
        if not os.path.exists(path):
            raise UsageError(f"scenario promised {name} but did not write it")
        file_table[name] = _sha256(path)
    manifest = RunManifest(cfg.raw, _version_string(), phases, file_table,
                           passed=passed)
    manifest.write(os.path.join(out_dir, "manifest.json"))
    return manifest


def emit_plot_data(result_dir):
    """Write gnuplot-ready two-column .dat files next to a run's artifacts."""
    manifest_path = os.path.join(result_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise UsageError(f"no manifest.json in {result_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    written = []
    density_csv = os.path.join(result_dir, "density.csv")
    if os.path.exists(density_csv):
        rows = np.loadtxt(density_csv, delimiter=",", skiprows=1)
        prov = {}
        prov_path = os.path.join(result_dir, "density_provenance.json")
        if os.path.exists(prov_path):
            with open(prov_path) as fh:
                prov = json.load(fh)
        out = os.path.join(result_dir, "density_profile.dat")
        header = (f"# z  p(z)   s={prov.get('s')} t={prov.get('t')} "
                  f"x={prov.get('x')} K={prov.get('truncation')}")
        with open(out, "w") as fh:
            fh.write(header + "\n")
            for r in rows:
                fh.write(f"{r[0]:.10e} {r[-1]:.10e}\n")
        written.append(out)
    picard_json = os.path.join(result_dir, "picard_history.json")
    if os.path.exists(picard_json):
        with open(picard_json) as fh:
            hist = json.load(fh)
        out = os.path.join(result_dir, "picard_ratios.dat")
        with open(out, "w") as fh:
            fh.write("# iterate  distance\n")
            for it in hist["iterations"]:
                fh.write(f"{it['iterate']} {it['distance_to_previous']:.10e}\n")
        written.append(out)
    chaos_json = os.path.join(result_dir, "chaos_table.json")
    if os.path.exists(chaos_json):
        with open(chaos_json) as fh:
            table = json.load(fh)
        out = os.path.join(result_dir, "chaos_w2.dat")
        with open(out, "w") as fh:
            fh.write("# N  W2\n")
            for row in sorted(table, key=lambda r: r["n"]):
                fh.write(f"{row['n']} {row['w2']:.10e}\n")
        written.append(out)
    if not written:
        raise UsageError(f"no plottable artifacts found in {result_dir}")
    _ = manifest
    return written


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="mvsde",
        description="numerical toolkit for distribution-dependent SDEs: "
                    "densities, fixed-point flows, particle systems, PDE checks")
    parser.add_argument("--config", required=False, help="TOML scenario file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP threads (default: library choice)")
    parser.add_argument("--verify-strict", action="store_true",
                        help="exit 2 whenever any soft check fails")
    parser.add_argument("--plot-data", metavar="DIR",
                        help="emit plot-ready .dat files for a finished run")
    args = parser.parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        if args.plot_data:
            for path in emit_plot_data(args.plot_data):
                print(path)
            return 0
        if not args.config:
            parser.error("--config or --plot-data is required")
        manifest = run_scenario(args.config, out_dir=args.out, seed=args.seed)
        print(json.dumps(manifest.as_dict(), indent=2))
        if not manifest.passed:
            return 2
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # numeric/convergence failures
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

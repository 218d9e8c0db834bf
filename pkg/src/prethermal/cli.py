"""Command line driver: ``prethermal <gamma|heating|normalform|lattice|sweep> [config.toml] [key=value ...]``.

Exit codes: 0 success, 1 assertion failure, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import copy
import datetime as _dt
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .io import config_hash, write_csv, write_json

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
EXPERIMENTS = ("gamma", "heating", "normalform", "lattice", "sweep")

GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0

DEFAULTS: dict[str, dict] = {
    "gamma": {"nu": [GOLDEN, 1.0], "tau": 1.2, "L": [10, 30, 100, 300, 1000]},
    "heating": {
        "alpha": GOLDEN, "p": 3, "tau": 1.2, "gamma": 0.0, "gamma_L": 64,
        "m": [3, 4, 5, 6, 7, 8, 9, 10, 11], "t_end_factor": 2.0, "method": "magnus4",
        "rel_tol": 1e-10, "abs_tol": 1e-12, "max_steps": 10_000_000,
        "n_log": 512, "n_lin": 256, "bisect_rtol": 1e-3, "slope_rtol": 0.15,
        "save_trajectories": True, "workers": 1,
    },
    "normalform": {
        "L": 1, "amplitude": 0.02, "max_mode": 48, "decay": 6.0, "seed": 7, "h": 1.0, "J": 0.5,
        "nu": [GOLDEN, 1.0], "tau": 1.2, "gamma_L": 64,
        "lambda": [100.0, 1000.0], "b": 0.3, "eps": 0.05, "p": 3, "kappa0": 0.5,
        "max_support": 6, "C_hat": 1.0, "workers": 1,
    },
    "lattice": {
        "n_sites": 6, "amplitude": 0.3, "max_mode": 3, "decay": 0.0, "seed": 7, "h": 1.0,
        "J": 0.5, "couplings": ["xx", "zz"], "nu": [GOLDEN, 1.0], "tau": 1.2, "gamma_L": 64,
        "lambda": [100.0, 1000.0], "b": 0.3, "eps": 0.05, "p": 3, "kappa0": 0.5,
        "T": 5.0, "n_times": 41, "order": 4, "c": 0.5, "observable_site": -1,
        "effective": True, "max_support": 3, "workers": 1,
    },
    "sweep": {"experiment": "lattice", "key": "lambda", "values": [], "workers": 1},
}


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# configuration


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _coerce(default, value, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            value = [value]
        if default:
            return [_coerce(default[0], v, key) for v in value]
        return list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    return value


def load_config(experiment: str, path: str | None = None, overrides=()) -> dict:
    """Defaults, then the TOML file, then ``key=value`` overrides."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    raw: dict = {}
    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if raw.get("experiment", experiment) != experiment:
        raise ConfigError(f"config is for {raw['experiment']!r}, not {experiment!r}")
    cfg = {"experiment": experiment, "output_dir": str(raw.get("output_dir", f"runs/{experiment}")),
           experiment: copy.deepcopy(DEFAULTS[experiment])}
    if experiment == "sweep":
        base = raw.get("sweep", {}).get("experiment", DEFAULTS["sweep"]["experiment"])
        if base not in EXPERIMENTS or base == "sweep":
            raise ConfigError(f"sweep experiment must be one of {EXPERIMENTS[:-1]}")
        cfg[base] = copy.deepcopy(DEFAULTS[base])
    sections = {k: v for k, v in raw.items() if isinstance(v, dict)}
    for sec, vals in sections.items():
        if sec not in cfg:
            raise ConfigError(f"unexpected section [{sec}]")
        for k, v in vals.items():
            _set(cfg, sec, k, v)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        val = _parse_value(text.strip())
        key = key.strip()
        if key == "output_dir":
            cfg["output_dir"] = str(val)
            continue
        sec, _, k = key.rpartition(".")
        _set(cfg, sec or experiment, k, val)
    _validate(cfg)
    return cfg


def _set(cfg: dict, sec: str, key: str, value):
    if sec not in cfg or not isinstance(cfg[sec], dict):
        raise ConfigError(f"unknown section {sec!r}")
    if key not in cfg[sec]:
        raise ConfigError(f"unknown key {sec}.{key}")
    if sec == "sweep" and key == "values":
        cfg[sec][key] = value if isinstance(value, list) else [value]
        return
    cfg[sec][key] = _coerce(DEFAULTS[sec][key], value, f"{sec}.{key}")


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def _validate(cfg: dict):
    exp = cfg["experiment"]
    if "gamma" in cfg and exp == "gamma":
        c = cfg["gamma"]
        _require(len(c["nu"]) >= 1, "gamma.nu must be non-empty")
        _require(c["tau"] > 0, "gamma.tau must be positive")
        _require(len(c["L"]) >= 1 and all(x >= 1 for x in c["L"]), "gamma.L must be positive integers")
    if "heating" in cfg:
        c = cfg["heating"]
        _require(c["alpha"] > 0, "heating.alpha must be positive")
        _require(c["p"] >= 3, "heating.p must be >= 3")
        _require(c["tau"] > 1, "heating.tau must exceed 1")
        _require(len(c["m"]) >= 1 and all(1 <= m <= 25 for m in c["m"]), "heating.m must lie in 1..25")
        _require(0 < c["t_end_factor"] <= 4, "heating.t_end_factor must lie in (0, 4]")
        _require(c["rel_tol"] > 0 and c["abs_tol"] > 0, "tolerances must be positive")
        _require(c["method"] in ("magnus4", "dop853"), "heating.method must be magnus4 or dop853")
        _require(c["workers"] >= 1, "workers must be positive")
    for sec in ("normalform", "lattice"):
        if sec not in cfg:
            continue
        c = cfg[sec]
        _require(len(c["lambda"]) >= 1, f"{sec}.lambda must be a non-empty list")
        _require(all(x > 1 for x in c["lambda"]), f"{sec}.lambda values must exceed 1")
        _require(c["p"] >= len(c["nu"]) + 1, f"{sec}.p must be at least n + 1")
        _require(0 < c["b"] < c["p"] / (c["p"] + c["tau"]), f"{sec}.b out of range")
        _require(0 < c["eps"] < 1 - c["b"] * (c["p"] + c["tau"]) / c["p"], f"{sec}.eps out of range")
        _require(c["workers"] >= 1, "workers must be positive")
    if "lattice" in cfg:
        c = cfg["lattice"]
        _require(1 <= c["n_sites"] <= 12, "lattice.n_sites must lie in 1..12")
        _require(-1 <= c["observable_site"] < c["n_sites"], "lattice.observable_site out of range")
        _require(c["order"] in (2, 4), "lattice.order must be 2 or 4")
        _require(c["T"] > 0 and c["n_times"] >= 2, "lattice.T and lattice.n_times must be positive")
    if exp == "sweep":
        c = cfg["sweep"]
        _require(len(c["values"]) >= 1, "sweep.values must be non-empty")
        _require(c["key"] in DEFAULTS[c["experiment"]], f"sweep.key {c['key']!r} unknown")
        _require(c["workers"] >= 1, "workers must be positive")


# ----------------------------------------------------------------------------
# experiments; each returns (status, files, summary)


def _gamma_for(nu, tau, L):
    from .normal_form import estimate_gamma
    return estimate_gamma(nu, tau, L)


def run_gamma(cfg: dict, out: Path):
    from .normal_form import ResonanceError, estimate_gamma
    c = cfg["gamma"]
    rows = []
    try:
        for L in sorted(c["L"]):
            g, w = estimate_gamma(c["nu"], c["tau"], L, return_witness=True)
            rows.append((L, g, w))
    except ResonanceError as exc:
        print(f"resonance: witness l = {exc.witness}", file=sys.stderr)
        raise ConfigError(str(exc)) from exc
    write_csv(out / "gamma.csv", ["L", "gamma_lower", "witness"],
              [(L, g, " ".join(str(x) for x in w)) for L, g, w in rows])
    mono = all(rows[i + 1][1] <= rows[i][1] for i in range(len(rows) - 1))
    return (EXIT_OK if mono else EXIT_ASSERT), ["gamma.csv"], {
        "gamma": [r[1] for r in rows], "monotone": mono}


def _heating_one(c: dict, m: int, out: str) -> dict:
    from .heating import (IntegratorConfig, NoHeating, build_scenario, convergents,
                          detect_heating_time, evolve, sample_grid)
    cs = convergents(c["alpha"], max(c["m"]))
    sc = build_scenario(cs, m, c["p"], c["tau"], c["gamma"])
    icfg = IntegratorConfig(c["method"], c["rel_tol"], c["abs_tol"], c["max_steps"])
    ts = sample_grid(sc.t_star, c["t_end_factor"] * sc.t_star, c["n_log"], c["n_lin"])
    tr = evolve(sc, cfg=icfg, times=ts)
    try:
        th = detect_heating_time(tr, c["bisect_rtol"])
        exc = None
    except NoHeating as e:
        th, exc = float("nan"), e.max_excursion
    i_star = int(np.argmin(np.abs(tr.times - sc.t_star)))
    upto = tr.times <= sc.t_star
    files = []
    outp = Path(out)
    if c["save_trajectories"]:
        fn = f"trajectory_m{m:02d}.csv"
        (outp / fn).write_bytes(tr.csv().encode())
        files.append(fn)
    sfn = f"scenario_m{m:02d}.json"
    write_json(outp / sfn, sc.to_dict())
    files.append(sfn)
    row = {
        "m": m, "k1": sc.k[0], "k2": sc.k[1], "k_norm": sc.k_norm, "lambda": sc.lambda_m,
        "t_star": sc.t_star, "t_heat": th, "window_lo": sc.window[0], "window_hi": sc.window[1],
        "in_window": bool(sc.window[0] <= th <= sc.window[1]),
        "excursion_t_star": float(tr.magnetization[i_star] - tr.magnetization[0]),
        "heats_by_t_star": bool(tr.magnetization[i_star] - tr.magnetization[0] >= 0.5),
        "remainder_samples": int(upto.sum()),
        "remainder_violations": int((~tr.remainder_check[upto]).sum()),
        "norm_drift": tr.norm_drift, "steps": tr.steps, "complete": tr.complete,
        "above_floor": sc.above_floor, "scenario_checks": all(sc.checks.values()),
        "no_heating_excursion": exc,
    }
    return {"row": row, "files": files}


def _pool_map(fn, args: list, workers: int):
    if workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        futs = [ex.submit(fn, *a) for a in args]
        return [f.result() for f in futs]


def run_heating(cfg: dict, out: Path):
    from .heating import scaling_fit
    c = dict(cfg["heating"])
    if c["gamma"] <= 0:
        c["gamma"] = _gamma_for([c["alpha"], 1.0], c["tau"], c["gamma_L"])
    res = _pool_map(_heating_one, [(c, m, str(out)) for m in c["m"]], c["workers"])
    rows = [r["row"] for r in res]
    files = [f for r in res for f in r["files"]]
    keys = list(rows[0])
    write_csv(out / "heating_summary.csv", keys, [[r[k] if r[k] is not None else "" for k in keys]
                                                   for r in rows])
    files.append("heating_summary.csv")
    summary = {"gamma": c["gamma"], "scenarios": rows}
    ok = all(r["complete"] for r in rows)
    # certified assertions only for scenarios above the documented floors
    for r in rows:
        if r["above_floor"]:
            ok &= r["heats_by_t_star"] and r["in_window"] and r["remainder_violations"] == 0
    good = [r for r in rows if math.isfinite(r["t_heat"])]
    if len(good) >= 2:
        try:
            slope, icpt, resid = scaling_fit([r["lambda"] for r in good], [r["t_heat"] for r in good])
            summary["fit"] = {"slope": slope, "intercept": icpt, "residual": resid}
            ok &= abs(slope - c["p"]) <= c["slope_rtol"] * c["p"]
            write_csv(out / "heating_fit.csv", ["slope", "intercept", "residual", "points"],
                      [(slope, icpt, resid, len(good))])
            files.append("heating_fit.csv")
        except ValueError as exc:
            summary["fit"] = {"skipped": str(exc)}
    return (EXIT_OK if ok else EXIT_ASSERT), files, summary


def _nf_inputs(c: dict):
    from .algebra import LatticeSpec
    from .models import chain_benchmark
    from .normal_form import DiophantineVector
    if "n_sites" in c:
        lat = LatticeSpec.chain(c["n_sites"])
        h0, v = chain_benchmark(lattice=lat, amplitude=c["amplitude"], max_mode=c["max_mode"],
                                decay=c["decay"], seed=c["seed"], h=c["h"], J=c["J"],
                                couplings=tuple(c["couplings"]))
    else:
        h0, v = chain_benchmark(c["L"], amplitude=c["amplitude"], max_mode=c["max_mode"],
                                decay=c["decay"], seed=c["seed"], h=c["h"], J=c["J"])
    nu = DiophantineVector.certify(c["nu"], c["tau"], c["gamma_L"])
    return h0, v, nu


def _normalform_one(c: dict, i: int, lam: float, out: str) -> dict:
    from .normal_form import NFConfig, NFSchedule, run_normal_form
    h0, v, nu = _nf_inputs(c)
    sch = NFSchedule(lam, c["b"], c["eps"], c["p"], c["tau"], c["kappa0"])
    res = run_normal_form(h0, v, sch, nu, NFConfig(max_support=c["max_support"], C_hat=c["C_hat"]))
    prefix = f"nf_{i:02d}"
    res.save(out, prefix)
    files = [f"{prefix}_{s}" for s in ("h_eff.json", "v_fin.json", "r_fin.json", "generators.json",
                                       "norms.csv")]
    row = {"lambda": lam, "n_star": sch.n_star, "K": sch.K, "sigma": sch.sigma,
           "normZ": res.final["normZ"], "normVR": res.final["normVR"],
           "truncation_mass": res.truncation_mass, "Z_bound": res.final["Z_bound"],
           "all_step_checks": res.final["all_step_checks"]}
    return {"row": row, "files": files, "manifest": f"{prefix}_manifest.json"}


def run_normalform(cfg: dict, out: Path):
    c = cfg["normalform"]
    args = [(c, i, lam, str(out)) for i, lam in enumerate(c["lambda"])]
    res = _pool_map(_normalform_one, args, c["workers"])
    rows = [r["row"] for r in res]
    keys = list(rows[0])
    write_csv(out / "normalform_summary.csv", keys, [[r[k] for k in keys] for r in rows])
    summary = {"runs": rows}
    if len(rows) >= 2:
        x = np.log([r["lambda"] for r in rows])
        y = np.log([max(r["normVR"], 1e-300) for r in rows])
        summary["VR_slope"] = float(np.polyfit(x, y, 1)[0])
    ok = all(r["all_step_checks"] and r["Z_bound"] for r in rows)
    # each run's own manifest lists its sidecars
    files = ["normalform_summary.csv"] + [r["manifest"] for r in res]
    return (EXIT_OK if ok else EXIT_ASSERT), files, summary


def _lattice_one(c: dict, i: int, lam: float, out: str) -> dict:
    from .algebra import SIGMA3, LocalTerm, TrigMatrix
    from .dynamics import (DriveSpec, PropagatorConfig, heating_diag, local_obs_diag,
                           observable_time_cap, propagate)
    from .io import csv_text
    from .normal_form import NFConfig, NFSchedule, run_normal_form
    h0, v, nu = _nf_inputs(c)
    drive = DriveSpec(h0, v, lam, nu.nu)
    ts = np.linspace(0.0, c["T"], c["n_times"])
    prop = propagate(drive, ts, PropagatorConfig(order=c["order"], c=c["c"]))
    hd = heating_diag(drive, ts, prop=prop)
    site = c["observable_site"] if c["observable_site"] >= 0 else c["n_sites"] // 2
    O = LocalTerm((site,), TrigMatrix.constant(SIGMA3, v.n))
    if c["effective"] and not v.is_zero:
        sch = NFSchedule(lam, c["b"], c["eps"], c["p"], c["tau"], c["kappa0"])
        h_eff = run_normal_form(h0, v, sch, nu, NFConfig(max_support=c["max_support"])).h_eff
    else:
        h_eff = h0
    od = local_obs_diag(drive, O, h_eff, ts, prop=prop)
    cap = observable_time_cap(lam, c["b"], c["p"], c["tau"], c["eps"], 1)
    fn = f"lattice_{i:02d}.csv"
    body = csv_text(["t", "heating", "obs_error"], zip(ts, hd.heating, od.obs_error))
    (Path(out) / fn).write_bytes(body.encode())
    within = ts <= cap
    row = {"lambda": lam, "plateau": hd.plateau, "obs_error_max": float(od.obs_error[within].max()),
           "time_cap": cap, "horizon": c["T"], "steps": prop.steps,
           "unitarity_defect": prop.max_defect}
    return {"row": row, "files": [fn]}


def run_lattice(cfg: dict, out: Path):
    c = cfg["lattice"]
    args = [(c, i, lam, str(out)) for i, lam in enumerate(c["lambda"])]
    res = _pool_map(_lattice_one, args, c["workers"])
    rows = [r["row"] for r in res]
    keys = list(rows[0])
    write_csv(out / "lattice_summary.csv", keys, [[r[k] for k in keys] for r in rows])
    files = [f for r in res for f in r["files"]] + ["lattice_summary.csv"]
    order = sorted(rows, key=lambda r: r["lambda"])
    mono = all(order[j + 1]["plateau"] <= order[j]["plateau"] for j in range(len(order) - 1))
    summary = {"runs": rows, "plateau_monotone": mono}
    if len(rows) >= 2 and all(r["plateau"] > 0 for r in rows):
        summary["plateau_slope"] = float(np.polyfit(np.log([r["lambda"] for r in rows]),
                                                    np.log([r["plateau"] for r in rows]), 1)[0])
    return (EXIT_OK if mono else EXIT_ASSERT), files, summary


RUNNERS = {"gamma": run_gamma, "heating": run_heating, "normalform": run_normalform,
           "lattice": run_lattice}


def _sweep_one(cfg: dict, i: int, value, out: str):
    base = cfg["sweep"]["experiment"]
    sub = {"experiment": base, "output_dir": str(Path(out) / f"run_{i:03d}"),
           base: copy.deepcopy(cfg[base])}
    key = cfg["sweep"]["key"]
    sub[base][key] = _coerce(DEFAULTS[base][key], value, f"{base}.{key}")
    _validate(sub)
    code = execute(sub)
    return {"value": value, "exit": code, "manifest": f"run_{i:03d}/run_manifest.json"}


def run_sweep(cfg: dict, out: Path):
    c = cfg["sweep"]
    args = [(cfg, i, v, str(out)) for i, v in enumerate(c["values"])]
    res = _pool_map(_sweep_one, args, c["workers"])
    write_csv(out / "sweep_summary.csv", ["index", "value", "exit"],
              [(i, str(r["value"]), r["exit"]) for i, r in enumerate(res)])
    code = max(r["exit"] for r in res)
    return code, ["sweep_summary.csv"] + [r["manifest"] for r in res], {"runs": res}


RUNNERS["sweep"] = run_sweep


def _tolerances(cfg: dict) -> dict:
    from .normal_form import NFConfig
    tol = {"normal_form": vars(NFConfig()).copy()}
    if "heating" in cfg:
        h = cfg["heating"]
        tol["heating"] = {k: h[k] for k in ("rel_tol", "abs_tol", "bisect_rtol", "slope_rtol")}
    if "lattice" in cfg:
        tol["lattice"] = {k: cfg["lattice"][k] for k in ("order", "c")}
    return tol


def execute(cfg: dict) -> int:
    """Run a validated configuration and write its manifest; returns the exit code."""
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    status, files, summary = RUNNERS[cfg["experiment"]](cfg, out)
    write_json(out / "run_manifest.json", {
        "code_version": __version__, "experiment": cfg["experiment"],
        "config": cfg, "config_hash": config_hash(cfg), "tolerances": _tolerances(cfg),
        "files": sorted(files), "summary": summary, "exit_code": status,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    })
    return status


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="prethermal", description=__doc__.splitlines()[0])
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("args", nargs="*", help="optional config.toml followed by key=value overrides")
    ns = ap.parse_args(argv)
    args = list(ns.args)
    path = None
    if args and "=" not in args[0]:
        path = args.pop(0)
    try:
        cfg = load_config(ns.experiment, path, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from .normal_form import NormalFormError, SeriesDivergence
    try:
        code = execute(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NormalFormError, SeriesDivergence, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"{ns.experiment}: exit {code}; manifest {Path(cfg['output_dir']) / 'run_manifest.json'}")
    return code


if __name__ == "__main__":
    sys.exit(main())

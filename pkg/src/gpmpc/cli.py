"""Command-line front end.

``simulate`` runs one episode, ``compare`` runs the two-phase NMPC/GPMPC
experiment over one or more seeds, ``gp-fit`` fits hyperparameters to a saved
dictionary and ``validate`` checks that written artifacts round-trip.

Exit codes: 0 ok, 2 configuration or input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import tomli
import tomli_w

from .config import (
    ConfigError, hyperparams_dict, load_dict, read_hyperparams, scenario_from_dict, write_hyperparams,
)
from .constraints import safe_zone
from .gp import Y_NAMES, Z_NAMES, GPDictionary, GPModel, fit_hyperparams
from .sim import Metrics, RunLog, Scenario, compute_metrics, read_csv, run_episode, two_phase_experiment, write_csv

logger = logging.getLogger("gpmpc")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

SUMMARY_COLUMNS = ("controller", "e_vx", "e_vy", "e_omega", "e_total")
PATH_COLUMNS = ("xi", "Xc", "Yc", "Phic", "Rc")
CORRIDOR_COLUMNS = ("step", "t", "active", "phase", "side", "line_ax", "line_ay", "line_rhs",
                    "zone_x_min", "zone_x_max", "zone_y_min", "zone_y_max")
PREDICTION_COLUMNS = ("step", "t", "k", "state", "mean", "two_sigma", "actual")
KNOWN_SCHEMAS = {
    "mse_summary.csv": SUMMARY_COLUMNS,
    "path.csv": PATH_COLUMNS,
    "corridors.csv": CORRIDOR_COLUMNS,
    "dictionary.csv": Z_NAMES + Y_NAMES,
}
STATE_NAMES = ("X", "Y", "phi", "vx", "vy", "omega")


class InputError(ValueError):
    """Bad command-line input that is not part of the scenario config."""


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"1..10"`` (inclusive) or ``"0,2,5"``."""
    try:
        if ".." in text:
            lo, hi = (int(s) for s in text.split("..", 1))
            if hi < lo:
                raise InputError(f"empty seed range {text!r}")
            return list(range(lo, hi + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise InputError(f"bad seed list {text!r}") from exc


# ---------------------------------------------------------------- artifacts

def path_rows(scenario: Scenario, step: float = 1.0) -> list[dict]:
    return [dict(zip(PATH_COLUMNS, map(float, r))) for r in scenario.path().sample(step)]


def corridor_rows(log: RunLog) -> list[dict]:
    rows = []
    for k, rec in enumerate(log.records):
        row = {"step": k, "t": rec["t"], "active": rec["active"], "phase": rec["phase"], "side": rec["side"],
               "line_ax": rec["corr_k"], "line_ay": rec["corr_ay"], "line_rhs": rec["corr_B3"]}
        zone = next((safe_zone(o) for o in log.obstacles[k] if o.ident == rec["active"]), None)
        lims = (zone.x_min, zone.x_max, zone.y_min, zone.y_max) if zone else (float("nan"),) * 4
        row.update(zip(CORRIDOR_COLUMNS[8:], map(float, lims)))
        rows.append(row)
    return rows


def prediction_rows(log: RunLog) -> list[dict]:
    """Horizon predictions against the states actually reached."""
    X = np.array(log.states)
    rows = []
    for step, rec in enumerate(log.records):
        k = 0
        while f"pred{k}_X" in rec:
            actual = X[step + k] if step + k < len(X) else None
            for i, name in enumerate(STATE_NAMES):
                rows.append({"step": step, "t": rec["t"], "k": k, "state": name, "mean": rec[f"pred{k}_{name}"],
                             "two_sigma": 2.0 * float(np.sqrt(max(rec[f"pvar{k}_{name}"], 0.0))),
                             "actual": float(actual[i]) if actual is not None else float("nan")})
            k += 1
    return rows


def metrics_row(mode: str, seed: int, m: Metrics) -> dict:
    return {"controller": mode, "seed": seed, **m.row()}


def summary_rows(per_seed: Sequence[tuple[Metrics, Metrics]]) -> list[dict]:
    """Median over seeds of each one-step MSE column."""
    rows = []
    for name, idx in (("NMPC", 0), ("GPMPC", 1)):
        ms = [pair[idx] for pair in per_seed]
        rows.append({"controller": name, **{c: float(np.median([getattr(m, c) for m in ms]))
                                            for c in SUMMARY_COLUMNS[1:]}})
    return rows


def write_config(path: Path, cfg: dict) -> None:
    path.write_text(tomli_w.dumps(cfg))


def write_episode(out: Path, log: RunLog, scenario: Scenario, prefix: str = "") -> Metrics:
    log.to_csv(out / f"{prefix}runlog.csv")
    write_csv(out / f"{prefix}corridors.csv", corridor_rows(log))
    write_csv(out / f"{prefix}predictions.csv", prediction_rows(log))
    return compute_metrics(log, scenario)


def plot_script(prefixes: Sequence[str]) -> str:
    """gnuplot script for the trajectory, input, speed and prediction views."""
    lines = ["# gnuplot script; run from this directory: gnuplot -p plots.gp",
             "set datafile separator ','", "set datafile commentschars '#'", "set key autotitle columnhead",
             "set grid", ""]
    p = prefixes[-1]
    lines += ["set title 'trajectories and safe zones'", "set xlabel 'X [m]'", "set ylabel 'Y [m]'",
              "set yrange [-3.75:3.75]",
              "plot " + ", \\\n     ".join(f"'{q}runlog.csv' using 'x_X':'x_Y' with lines title '{q.rstrip('_') or 'ego'}'"
                                         for q in prefixes) + ", \\",
              f"     '{p}corridors.csv' every 10 using 'zone_x_min':'zone_y_min':"
              "(column('zone_x_max')-column('zone_x_min')):(column('zone_y_max')-column('zone_y_min'))"
              " with boxxyerror notitle",
              "pause -1", "unset yrange", ""]
    for col, label in (("delta", "steering [rad]"), ("T", "pedal [-]"), ("x_vx", "vx [m/s]")):
        lines += [f"set title '{label}'", "set xlabel 't [s]'", f"set ylabel '{label}'",
                  "plot " + ", \\\n     ".join(f"'{q}runlog.csv' using 't':'{col}' with lines title '{q.rstrip('_') or 'ego'}'"
                                             for q in prefixes),
                  "pause -1", ""]
    lines += ["# one-step-ahead predictions with 2-sigma band (rows with k = 1)",
              "set title 'vy: predicted vs actual'", "set xlabel 't [s]'", "set ylabel 'vy [m/s]'",
              f"plot '{p}predictions.csv' using 't':(strcol('state') eq 'vy' && column('k') == 1 ? column('mean') : 1/0)"
              ":(column('two_sigma')) with yerrorbars title 'prediction', \\",
              f"     '{p}predictions.csv' using 't':(strcol('state') eq 'vy' && column('k') == 1 ? column('actual') : 1/0)"
              " with lines title 'actual'",
              "pause -1", ""]
    return "\n".join(lines)


# ---------------------------------------------------------------- commands

def _load(args) -> tuple[dict, Scenario]:
    cfg = load_dict(args.scenario, args.override or (), args.hyperparams)
    return cfg, scenario_from_dict(cfg)


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg, scenario = _load(args)
    model = None
    if args.mode == "gpmpc":
        if args.dictionary:
            if not Path(args.dictionary).is_file():
                raise InputError(f"dictionary file not found: {args.dictionary}")
            d = GPDictionary.from_csv(args.dictionary, scenario.gp.n_max, scenario.gp.sigma_evict)
        else:
            d = GPDictionary(n_max=scenario.gp.n_max, sigma_evict=scenario.gp.sigma_evict)
        model = GPModel(scenario.gp.hyperparams, d, scenario.gp.evict_dim)
    out = _outdir(args.out)
    write_config(out / "config.toml", cfg)
    log = run_episode(scenario, args.mode, model, args.seed)
    m = write_episode(out, log, scenario)
    write_csv(out / "path.csv", path_rows(scenario))
    write_csv(out / "metrics.csv", [metrics_row(args.mode, args.seed, m)])
    (out / "plots.gp").write_text(plot_script([""]))
    print(f"{args.mode} seed {args.seed}: e_total={m.e_total:.6g} zone_entries={m.zone_entries} "
          f"overtakes={m.overtakes} steps={log.n_steps}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg, scenario = _load(args)
    seeds = parse_seeds(args.seeds) if args.seeds is not None else [args.seed]
    if not seeds:
        raise InputError("no seeds given")
    out = _outdir(args.out)
    write_config(out / "config.toml", cfg)
    write_csv(out / "path.csv", path_rows(scenario))
    per_seed, rows = [], []
    for seed in seeds:
        res = two_phase_experiment(scenario, seed)
        sd = out / f"seed_{seed}"
        sd.mkdir(exist_ok=True)
        for prefix, log in (("nmpc_", res.nmpc_log), ("gpmpc_", res.gpmpc_log)):
            log.to_csv(sd / f"{prefix}runlog.csv")
            write_csv(sd / f"{prefix}corridors.csv", corridor_rows(log))
            write_csv(sd / f"{prefix}predictions.csv", prediction_rows(log))
        res.initial_dictionary.to_csv(sd / "dictionary.csv")
        write_hyperparams(sd / "hyperparams.toml", res.model.hyperparams)
        (sd / "plots.gp").write_text(plot_script(["nmpc_", "gpmpc_"]))
        per_seed.append((res.nmpc, res.gpmpc))
        rows += [metrics_row("NMPC", seed, res.nmpc), metrics_row("GPMPC", seed, res.gpmpc)]
        print(f"seed {seed}: e_total NMPC={res.nmpc.e_total:.6g} GPMPC={res.gpmpc.e_total:.6g} "
              f"GPMPC zone_entries={res.gpmpc.zone_entries} overtakes={res.gpmpc.overtakes}")
    write_csv(out / "seeds.csv", rows)
    write_csv(out / "mse_summary.csv", summary_rows(per_seed))
    return EXIT_OK


def cmd_gp_fit(args) -> int:
    _, scenario = _load(args)
    path = Path(args.dictionary_csv)
    if not path.is_file():
        raise InputError(f"dictionary file not found: {path}")
    try:
        d = GPDictionary.from_csv(path)
    except (ValueError, StopIteration) as exc:
        raise InputError(str(exc)) from exc
    try:
        hps = [fit_hyperparams(d, scenario.gp.hyperparams[i], i, max_iter=scenario.gp.fit_max_iter).hyperparams
               for i in range(len(Y_NAMES))]
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_hyperparams(out, hps)
    print(f"fitted {len(Y_NAMES)} outputs on {len(d)} points -> {out}")
    return EXIT_OK


def _roundtrip_csv(path: Path) -> Optional[str]:
    try:
        rows = read_csv(path)
    except (ValueError, OSError) as exc:
        return str(exc)
    raw = path.read_text()
    header = raw.splitlines()[1].split(",")
    expected = KNOWN_SCHEMAS.get(path.name) or next(
        (v for k, v in KNOWN_SCHEMAS.items() if path.name.endswith("_" + k)), None)
    if expected is not None and tuple(header) != tuple(expected):
        return f"header {header} differs from the documented schema {list(expected)}"
    buf = io.StringIO()
    buf.write("# schema: " + ",".join(header) + "\n")
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if buf.getvalue() != raw:
        return "rewriting the parsed rows does not reproduce the file"
    return None


def _roundtrip_toml(path: Path) -> Optional[str]:
    try:
        data = tomli.loads(path.read_text())
        if "gp" in data and set(data) == {"gp"}:
            if tomli_w.dumps(hyperparams_dict(read_hyperparams(path))) != path.read_text():
                return "re-serialized hyperparameters differ"
        else:
            scenario_from_dict(load_dict(path))
    except (ConfigError, tomli.TOMLDecodeError) as exc:
        return str(exc)
    return None


def cmd_validate(args) -> int:
    files: list[Path] = []
    for p in map(Path, args.paths):
        if p.is_dir():
            files += sorted(q for q in p.rglob("*") if q.suffix in (".csv", ".toml"))
        elif p.is_file():
            files.append(p)
        else:
            raise InputError(f"no such file or directory: {p}")
    bad = 0
    for f in files:
        err = _roundtrip_csv(f) if f.suffix == ".csv" else _roundtrip_toml(f)
        status = "ok" if err is None else f"FAIL: {err}"
        bad += err is not None
        print(f"{f}: {status}")
    print(f"{len(files) - bad}/{len(files)} artifacts valid")
    return EXIT_OK if bad == 0 else EXIT_CONFIG


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpmpc", description="GP-augmented MPC overtaking experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--scenario", type=Path, help="scenario TOML file (default: built-in reference scenario)")
        p.add_argument("--override", action="append", metavar="KEY=VALUE", help="override one config value")
        p.add_argument("--hyperparams", type=Path, help="hyperparameter TOML file (as written by gp-fit)")
        if out_default is not None:
            p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("simulate", help="run one closed-loop episode")
    common(p, "out")
    p.add_argument("--mode", choices=("nmpc", "gpmpc"), default="gpmpc")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dictionary", help="initial GP dictionary CSV for gpmpc mode (default: empty)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="two-phase NMPC then GPMPC experiment")
    common(p, "out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", help="seed list: N, A..B (inclusive) or A,B,C; overrides --seed")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gp-fit", help="fit hyperparameters to a dictionary CSV")
    p.add_argument("dictionary_csv")
    common(p, None)
    p.add_argument("--out", default="hyperparams.toml", help="output TOML file")
    p.set_defaults(func=cmd_gp_fit)

    p = sub.add_parser("validate", help="check that CSV/TOML artifacts match their schema and round-trip")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure inside a run is reported, not raised
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()

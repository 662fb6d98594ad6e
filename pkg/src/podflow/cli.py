"""Command-line front end for the experiment pipeline.

``podflow`` exposes one subcommand per pipeline stage (``fom``, ``pod``,
``rom``), the two studies under ``study``, and ``report`` for turning run
artifacts into summaries and plot scripts. Every run is driven by a JSON
configuration file plus optional ``--override section.key=value``
assignments. Exit codes: 0 on success, 1 on a configuration error, 2 on a
runtime failure inside a stage.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .harness import (
    ConfigError,
    ExperimentConfig,
    StageError,
    convergence_study,
    long_horizon_study,
    read_csv,
    run_pipeline,
    write_convergence_csv,
    write_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _load_config(args):
    overrides = list(args.override or ())
    if args.seed is not None:
        overrides.append(f"seed={int(args.seed)}")
    if args.out_dir is not None:
        overrides.append(f"output.directory={args.out_dir}")
    return ExperimentConfig.from_json(args.config, overrides=overrides)


def _out_dir(config, args):
    return Path(config.output_directory if args.out_dir is None else args.out_dir)


def cmd_fom(args):
    config = _load_config(args)
    result = run_pipeline(config, out_dir=_out_dir(config, args),
                          stop_after="fom")
    qoi = result.fom_run.qoi
    print(f"full-order run: {qoi.shape[0]} recorded steps, "
          f"{result.vel_snapshots.n_snapshots} snapshots, "
          f"final E_kin={qoi[-1, 1]:.6g}")
    return EXIT_OK


def cmd_pod(args):
    config = _load_config(args)
    result = run_pipeline(config, out_dir=_out_dir(config, args),
                          stop_after="pod")
    basis = result.vel_basis
    eigs = basis.eigenvalues
    print(f"velocity basis: rank {basis.rank}, selected r={basis.r}, "
          f"leading eigenvalue {eigs[0]:.6g}, "
          f"trailing eigenvalue {eigs[-1]:.6g}")
    return EXIT_OK


def cmd_rom(args):
    config = _load_config(args)
    result = run_pipeline(config, out_dir=_out_dir(config, args))
    run = result.rom_run
    print(f"reduced run: r={result.operators.r}, {run.times.size - 1} steps, "
          f"final E_kin={run.energy_traj[-1]:.6g}, "
          f"final mu={run.mu_traj[-1]:.6g}")
    for row in result.error_table:
        print(f"  r={int(row[0])}: vel_error={row[1]:.6g} "
              f"pres_error={row[2]:.6g}")
    return EXIT_OK


def cmd_study_convergence(args):
    study = convergence_study(
        args.scheme, levels=args.levels, base_nx=args.base_nx,
        base_dt=args.base_dt, t_final=args.t_final, nu=args.nu)
    out = Path(args.out_dir or "out")
    out.mkdir(parents=True, exist_ok=True)
    path = write_convergence_csv(study, out / "convergence.csv")
    for k in range(len(study.mesh_sizes)):
        order = f"{study.orders[k - 1]:.3f}" if k > 0 else "-"
        print(f"nx={study.mesh_sizes[k]:4d} dt={study.step_sizes[k]:.3e} "
              f"error={study.errors[k]:.6e} order={order}")
    print(f"interpolation orders: "
          f"{[f'{o:.3f}' for o in study.interpolation_orders]}")
    if study.non_monotone:
        print("warning: the error sequence is not monotone")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_study_longhorizon(args):
    config = _load_config(args)
    out = _out_dir(config, args)
    study = long_horizon_study(config, horizon_multiple=args.horizon,
                               out_dir=out)
    print(f"horizon x{study.horizon_multiple:g}: "
          f"max|E_diff| constant={study.max_e_diff_constant:.6g} "
          f"adaptive={study.max_e_diff_adaptive:.6g}")
    if study.blow_up_constant:
        print("constant run blew up")
    if study.blow_up_adaptive:
        print("adaptive run blew up")
    return EXIT_OK


_PLOT_SCRIPT = '''"""Plot {title} from {csv_name} (written next to this script)."""
import csv
from pathlib import Path

import matplotlib.pyplot as plt

here = Path(__file__).resolve().parent
with open(here / "{csv_name}") as fh:
    rows = list(csv.reader(fh))
header, data = rows[0], [[float(v) for v in row] for row in rows[1:]]
cols = {{name: [row[k] for row in data] for k, name in enumerate(header)}}

fig, ax = plt.subplots()
for name in {series!r}:
    ax.plot(cols["{x}"], cols[name], label=name)
ax.set_xlabel("{x}")
ax.set_title({title!r})
ax.legend()
fig.savefig(here / "{png_name}", dpi=150)
print("wrote", here / "{png_name}")
'''


def _write_plot_script(out, csv_name, x, series, title):
    stem = Path(csv_name).stem
    script = out / f"plot_{stem}.py"
    with open(script, "w") as fh:
        fh.write(_PLOT_SCRIPT.format(csv_name=csv_name, x=x, series=series,
                                     title=title, png_name=f"{stem}.png"))
    return script


def cmd_report(args):
    out = Path(args.out_dir or "out")
    if not out.is_dir():
        raise ConfigError("report_missing", f"no run directory at {out}")
    summary = {}
    written = []

    qoi_path = out / "qoi.csv"
    if qoi_path.exists():
        header, data = read_csv(qoi_path)
        summary["fom_steps"] = int(data.shape[0])
        summary["fom_final_E_kin"] = float(data[-1, header.index("E_kin")])
        summary["fom_max_weak_div"] = float(
            np.nanmax(data[:, header.index("weak_div")]))
        written.append(_write_plot_script(
            out, "qoi.csv", "t", ["E_kin"], "full-order kinetic energy"))

    rom_path = out / "rom.csv"
    if rom_path.exists():
        header, data = read_csv(rom_path)
        summary["rom_steps"] = int(data.shape[0]) - 1
        summary["rom_final_E_kin"] = float(data[-1, header.index("E_kin")])
        e_diff = data[:, header.index("E_diff")]
        if np.any(np.isfinite(e_diff)):
            summary["rom_max_E_diff"] = float(np.nanmax(np.abs(e_diff)))
        written.append(_write_plot_script(
            out, "rom.csv", "t", ["E_kin", "mu"], "reduced run"))

    err_path = out / "errors.csv"
    if err_path.exists():
        header, data = read_csv(err_path)
        summary["error_table_sizes"] = [int(v) for v in data[:, 0]]
        summary["min_vel_error"] = float(np.nanmin(data[:, 1]))
        written.append(_write_plot_script(
            out, "errors.csv", "r", ["vel_error", "vel_indicator"],
            "reduced error against its indicator"))

    mu_path = out / "mu.csv"
    if mu_path.exists():
        header, data = read_csv(mu_path)
        mu_col = data[:, header.index("mu")]
        summary["mu_changes"] = int(np.sum(np.diff(mu_col) != 0.0))
        summary["mu_final"] = float(mu_col[-1])
        written.append(_write_plot_script(
            out, "mu.csv", "t", ["mu"], "adaptive grad-div coefficient"))

    conv_path = out / "convergence.csv"
    if conv_path.exists():
        header, data = read_csv(conv_path)
        orders = data[1:, header.index("order")]
        summary["observed_orders"] = [float(v) for v in orders]
        written.append(_write_plot_script(
            out, "convergence.csv", "nx", ["error", "interp_error"],
            "refinement errors"))

    if not summary:
        raise ConfigError("report_empty", f"no known artifacts under {out}")
    with open(out / "report.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    for script in written:
        print(f"wrote {script}")
    print(f"wrote {out / 'report.json'}")
    return EXIT_OK


def _add_config_arguments(parser):
    parser.add_argument("--config", required=True,
                        help="JSON experiment configuration")
    parser.add_argument("--out-dir", default=None,
                        help="artifact directory (defaults to the config's)")
    parser.add_argument("--seed", type=int, default=None,
                        help="seed recorded in the run metadata")
    parser.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="config override such as rom.mu=0.4 (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="podflow",
        description="Stabilized reduced-order models of incompressible flow")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fom = sub.add_parser("fom", help="run the full-order solver")
    _add_config_arguments(p_fom)
    p_fom.set_defaults(func=cmd_fom)

    p_pod = sub.add_parser("pod", help="extract the reduced bases")
    _add_config_arguments(p_pod)
    p_pod.set_defaults(func=cmd_pod)

    p_rom = sub.add_parser("rom", help="run the reduced model")
    _add_config_arguments(p_rom)
    p_rom.set_defaults(func=cmd_rom)

    p_study = sub.add_parser("study", help="parameter studies")
    study_sub = p_study.add_subparsers(dest="study_command", required=True)

    p_conv = study_sub.add_parser("convergence",
                                  help="refinement study on the decaying vortex")
    p_conv.add_argument("--scheme", choices=("lps", "graddiv"), default="lps")
    p_conv.add_argument("--levels", type=int, default=3)
    p_conv.add_argument("--base-nx", type=int, default=4)
    p_conv.add_argument("--base-dt", type=float, default=2e-2)
    p_conv.add_argument("--t-final", type=float, default=8e-2)
    p_conv.add_argument("--nu", type=float, default=1e-2)
    p_conv.add_argument("--out-dir", default=None)
    p_conv.set_defaults(func=cmd_study_convergence)

    p_long = study_sub.add_parser("longhorizon",
                                  help="constant versus adaptive coefficient "
                                       "over an extended horizon")
    _add_config_arguments(p_long)
    p_long.add_argument("--horizon", type=float, default=10.0,
                        help="reduced horizon as a multiple of the snapshot window")
    p_long.set_defaults(func=cmd_study_longhorizon)

    p_report = sub.add_parser("report",
                              help="summarize artifacts and write plot scripts")
    p_report.add_argument("--out-dir", default="out",
                          help="run directory holding the CSV artifacts")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; report those as
        # configuration problems and keep 0 for --help.
        if exc.code not in (0, None):
            return EXIT_CONFIG
        return EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

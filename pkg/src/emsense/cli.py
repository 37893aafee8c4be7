"""Command line entry point.

Subcommands::

    run CONFIG            run the sweep described by a YAML experiment file
    sweep [CONFIG]        same, with sweep axes given on the command line
    design-pilots         design (or draw random) pilots for a scenario and save them
    classify              cluster and label a reconstructed image (CSV grids)
    report REPORTS_CSV    summary table plus PNG figures

Flags map one-for-one onto ``ExperimentConfig`` keys; ``--set a.b=v`` reaches
nested keys (``--set fusion.rho=0.3``).  Tables go to stdout as CSV.
Exit status is 0 when every sweep point succeeded, 1 otherwise.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import build_scene, load_scenario
from .em_forward import ChannelSet
from .harness import ExperimentConfig, RunReport, load_images, run_experiment
from .materials import accuracy, identify, load_material_db
from .pilots import mutual_coherence, random_pilots, save_pilots

log = logging.getLogger("emsense")


def _floats(text: str):
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        out.append(None if tok.lower() in ("none", "inf", "-inf") else float(tok))
    return out


def _ints(text: str):
    return [int(t) for t in text.split(",") if t.strip()]


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--scenario", help="built-in scenario name or YAML path")
    p.add_argument("--snr-db", type=_floats, help="comma-separated SNR list")
    p.add_argument("--K", type=_ints, help="comma-separated subcarrier counts")
    p.add_argument("--L", type=_ints, help="comma-separated BS counts (first L BSs are fused)")
    p.add_argument("--channel-error-db", type=_floats, help="comma-separated channel NMSE list; 'none' = exact")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--export-images", action="store_true", default=None)
    p.add_argument("--no-classify", dest="classify", action="store_false", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="nested override, e.g. fusion.max_mann=100 (value parsed as YAML)")


def _apply_overrides(d: dict, args) -> dict:
    for key in ("scenario", "snr_db", "K", "L", "channel_error_db", "seed", "output_dir", "export_images", "classify"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    for item in args.set:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return d


def _load_config(path, args) -> ExperimentConfig:
    d = {}
    if path:
        d = yaml.safe_load(Path(path).read_text()) or {}
        if isinstance(d.get("scenario"), str):
            cand = Path(path).parent / d["scenario"]
            if cand.suffix in (".yaml", ".yml") and cand.exists():
                d["scenario"] = str(cand)
    return ExperimentConfig.from_dict(_apply_overrides(d, args))


def _print_reports(reports: list[RunReport]):
    cols = ["config_hash", "snr_db", "K", "L", "channel_error_db", "status", "nmse_db", "accuracy", "accuracy_all",
            "mann_iterations", "overhead", "wall_time"]
    w = csv.writer(sys.stdout)
    w.writerow(cols)
    for r in reports:
        w.writerow([getattr(r, c) for c in cols])


def cmd_run(args) -> int:
    cfg = _load_config(args.config, args)
    reports = run_experiment(cfg)
    _print_reports(reports)
    return 0 if all(r.status == "ok" for r in reports) else 1


def cmd_design_pilots(args) -> int:
    scenario = load_scenario(args.scenario)
    scene, _ = build_scene(scenario, args.K)
    channels = ChannelSet.build(scene)
    from .harness import make_pilots

    cfg = ExperimentConfig(scenario=scenario, seed=args.seed, pilots={"mode": args.mode, "gamma": args.gamma})
    pilots, flags = make_pilots(channels, cfg, args.seed)
    save_pilots(args.out, pilots)
    rng = np.random.default_rng([args.seed, 99])
    w = csv.writer(sys.stdout)
    w.writerow(["k", "u", "coherence", "coherence_random"])
    for k in range(channels.K):
        for u, ue in enumerate(scene.ues):
            H = channels.H1[k, u]
            w.writerow([k, u, f"{mutual_coherence(H @ pilots[k, u]):.6f}",
                        f"{mutual_coherence(H @ random_pilots(ue.n_t, scene.n_pilots, ue.power_budget, rng)):.6f}"])
    if any(flags):
        log.warning("%d pilot designs flagged an unreachable region-power floor", sum(flags))
    return 0


def cmd_classify(args) -> int:
    s = load_images(args.eps_csv, args.sigma_csv)
    scenario = load_scenario(args.scenario)
    scene, truth = build_scene(scenario)
    db = load_material_db(args.materials) if args.materials else truth.material_db
    clusters, cls, _ = identify(s, db, scene.subcarriers.omega_c, args.eps, args.min_pts)
    w = csv.writer(sys.stdout)
    w.writerow(["cluster", "count", "eps_r", "sigma_scaled", "material"])
    names = ["air"] + [m.name for m in db]
    for c in range(clusters.n_clusters):
        w.writerow([c, clusters.counts[c], f"{clusters.centroids[c, 0]:.6g}", f"{clusters.centroids[c, 1]:.6g}",
                    names[cls.cluster_materials[c]]])
    w.writerow(["noise", int(np.sum(clusters.labels < 0)), "", "", ""])
    if args.truth:
        print(f"accuracy_target,{accuracy(cls.pixel_labels, truth):.6f}")
        print(f"accuracy_all,{accuracy(cls.pixel_labels, truth, include_air=True):.6f}")
    return 0


def cmd_report(args) -> int:
    from .plotting import SUMMARY_COLUMNS, report

    summary, figures = report(args.reports, args.out)
    w = csv.DictWriter(sys.stdout, fieldnames=SUMMARY_COLUMNS)
    w.writeheader()
    for row in summary:
        w.writerow(row)
    out = Path(args.out)
    with (out / "summary.csv").open("w", newline="") as fh:
        dw = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        dw.writeheader()
        dw.writerows(summary)
    for f in figures:
        log.info("wrote %s", f)
    return 0 if all(r["failed"] == 0 for r in summary) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emsense", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment file")
    p.add_argument("config")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a sweep given by axis flags")
    p.add_argument("config", nargs="?")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("design-pilots", help="design pilots and save them")
    p.add_argument("--scenario", default="desk")
    p.add_argument("--K", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--mode", choices=("designed", "random"), default="designed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_design_pilots)

    p = sub.add_parser("classify", help="classify a reconstructed image")
    p.add_argument("eps_csv")
    p.add_argument("sigma_csv")
    p.add_argument("--scenario", default="desk")
    p.add_argument("--materials")
    p.add_argument("--eps", type=float)
    p.add_argument("--min-pts", type=int, default=4)
    p.add_argument("--truth", action="store_true", help="score against the scenario phantom")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("report", help="summarize a reports CSV")
    p.add_argument("reports")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""``msfilter <subcommand> --config PATH [--seed S] [--workers K] [--out DIR]``.

Exit status: 0 on success, 2 on a configuration error, 3 on a numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .averaged_model import save_averaged_model
from .cell_problem import check_assumptions, check_centering, default_probes, estimate_stationary
from .config import ExperimentConfig, load_config
from .errors import ConfigError, MsFilterError
from .filters import (particle_filter_averaged, particle_filter_full, write_ensemble_dump,
                      write_filter_csv)
from .metrics import build_averaged, convergence_experiment
from .registry import get_entry
from .sde_core import simulate_multiscale, write_path_csv

log = logging.getLogger("msfilter")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _out_dir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def cmd_simulate(cfg: ExperimentConfig, workers: int) -> int:
    model = cfg.build_model()
    bundle = simulate_multiscale(model, cfg.eps, cfg.dt_for(cfg.eps), cfg.T,
                                 rngmod.derive_seed(cfg.seed, "simulate"), dt_rule=cfg.dt_rule)
    out = _out_dir(cfg)
    write_path_csv(bundle, out / "path.csv", comments=cfg.provenance() + [f"eps={cfg.eps!r}"])
    print(f"wrote {out / 'path.csv'} ({len(bundle.times)} rows)")
    return EXIT_OK


def cmd_average(cfg: ExperimentConfig, workers: int) -> int:
    start = time.perf_counter()
    avg = build_averaged(cfg)
    out = _out_dir(cfg)
    save_averaged_model(avg, out / "averaged.json",
                        provenance={"config_sha256": cfg.source_sha256, "seed": cfg.seed})
    _write_json(out / "averaged.run.json", {"runtime": time.perf_counter() - start})
    print(f"wrote {out / 'averaged.json'} ({len(avg.grid.nodes)} nodes)")
    return EXIT_OK


def cmd_filter(cfg: ExperimentConfig, workers: int) -> int:
    start = time.perf_counter()
    model = cfg.build_model()
    avg = build_averaged(cfg, model)
    bundle = simulate_multiscale(model, cfg.eps, cfg.dt_for(cfg.eps), cfg.T,
                                 rngmod.derive_seed(cfg.seed, "filter", "truth"),
                                 dt_rule=cfg.dt_rule)
    obs = bundle.observation
    policy = cfg.resample_policy()
    full = particle_filter_full(model, cfg.eps, obs, cfg.N, policy,
                                rngmod.derive_seed(cfg.seed, "filter", "full"),
                                dt_rule=cfg.dt_rule)
    red = particle_filter_averaged(avg, obs, cfg.N, model, policy,
                                   rngmod.derive_seed(cfg.seed, "filter", "averaged"))
    out = _out_dir(cfg)
    comments = cfg.provenance() + [f"eps={cfg.eps!r}"]
    write_path_csv(bundle, out / "truth.csv", comments=comments)
    write_filter_csv(full, out / "filter_full.csv", comments=comments + ["filter=full"])
    write_filter_csv(red, out / "filter_averaged.csv", comments=comments + ["filter=averaged"])
    if cfg.dump_ensembles:
        meta = {"config_sha256": cfg.source_sha256, "seed": cfg.seed}
        write_ensemble_dump(full.marginal(), out / "ensembles_full.pf", meta)
        write_ensemble_dump(red, out / "ensembles_averaged.pf", meta)
    _write_json(out / "filter.run.json", {"runtime": time.perf_counter() - start,
                                          "config": cfg.echo()})
    print(f"wrote filter_full.csv and filter_averaged.csv to {out}")
    return EXIT_OK


def cmd_converge(cfg: ExperimentConfig, workers: int) -> int:
    report = convergence_experiment(cfg, workers=workers)
    out = _out_dir(cfg)
    comments = cfg.provenance() + [f"dictionary_seed={cfg.dictionary_seed}",
                                   f"dictionary_size={cfg.dictionary_size}"]
    report.write_csv(out / "report.csv", comments=comments)
    (out / "report.json").write_text(report.to_json() + "\n")
    for row in report.rows():
        print("eps=%-6g D_norm=%.4f+-%.4f D_unnorm=%.4f+-%.4f failures=%d"
              % (row[0], row[1], row[2], row[3], row[4], row[6]))
    return EXIT_OK


def cmd_check(cfg: ExperimentConfig, workers: int) -> int:
    model = cfg.build_model()
    entry = get_entry(cfg.model)
    grid = cfg.grid()
    rng = rngmod.stream(cfg.seed, "check")
    report = check_assumptions(model, default_probes(model, grid.nodes, rng))
    lines = [f"model {model.name}: {entry.hypotheses}"] + report.lines()
    centered = True
    params = cfg.averaging_params().stationary
    for i, x in enumerate(grid.nodes[:: max(1, len(grid.nodes) // 5)]):
        stat = estimate_stationary(model, x, params, rngmod.derive_seed(cfg.seed, "check", i))
        cc = check_centering(model, x, stat)
        ok = cc.centered
        centered &= ok
        lines.append(f"centering at x={np.array2string(x, precision=3)}: residual "
                     f"{np.array2string(cc.residual, precision=3)} (SE "
                     f"{np.array2string(cc.stderr, precision=3)}) -> "
                     f"{'within 3 SE' if ok else 'NOT centered'}")
    print("\n".join(lines))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "average": cmd_average, "filter": cmd_filter,
            "converge": cmd_converge, "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msfilter", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out")
    return parser


def _setup_logging():
    level = os.environ.get("MSFILTER_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")
    if level != "debug":
        warnings.simplefilter("default")


def run(subcommand: str, config_path, seed=None, workers: int = 1, out=None) -> int:
    try:
        cfg = load_config(config_path, seed=seed, output_dir=out)
        if workers < 1:
            raise ConfigError("--workers must be at least 1")
        return COMMANDS[subcommand](cfg, workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MsFilterError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    return run(args.subcommand, args.config, args.seed, args.workers, args.out)


if __name__ == "__main__":
    sys.exit(main())

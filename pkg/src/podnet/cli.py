"""Command line entry point: ``podnet run`` and ``podnet inspect``."""

import argparse
import json
import logging
import sys

from . import network
from .errors import StageError
from .experiments import ExperimentConfig, emit_report, report_text, run_experiment


def _parser():
    p = argparse.ArgumentParser(prog="podnet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--experiment", type=int, choices=(1, 2, 3, 4),
                   help="override the experiment id in the config")
    r.add_argument("--dry-run", action="store_true",
                   help="echo the config and sample counts, no training")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out", default="out")

    i = sub.add_parser("inspect", help="describe a saved network bundle")
    i.add_argument("--bundle", required=True)
    return p


def _run(args):
    cfg = ExperimentConfig.load(args.config)
    if args.experiment is not None and args.experiment != cfg.experiment:
        d = cfg.to_json()
        d["experiment"] = args.experiment
        # sweep defaults belong to the experiment id
        if d["layers"] == ExperimentConfig(experiment=cfg.experiment).layers:
            d["layers"] = None
        if d["neurons"] == ExperimentConfig(experiment=cfg.experiment).neurons:
            d["neurons"] = None
        cfg = ExperimentConfig.from_json(d)
    if args.dry_run:
        report = run_experiment(cfg, dry_run=True)
        print(json.dumps({"config": report.config, "counts": report.info}, indent=2, sort_keys=True))
        return 0
    report = run_experiment(cfg, out_dir=args.out, workers=args.workers)
    if not cfg.write_artifacts:
        emit_report(report, args.out)
    sys.stdout.write(report_text(report))
    return 0


def _inspect(args):
    net = network.load_bundle(args.bundle)
    info = {
        "dims": list(net.dims),
        "n_layers": net.n_layers,
        "n_params": net.n_params,
        "hidden_slope": net.hidden_slope,
        "output_activation": net.output_activation,
        "normalized": net.normalizer is not None,
        "seed": net.seed,
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args) if args.command == "run" else _inspect(args)
    except StageError as exc:
        print(f"error: stage={exc.stage} seed={exc.seed}: "
              f"{type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

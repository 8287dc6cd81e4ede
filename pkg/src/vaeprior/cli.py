"""Command-line entry point: ``vaeprior <subcommand> --config FILE``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, load, override

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("vaeprior")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="experiment YAML file")
    p.add_argument("--profile", choices=("desk", "paper"),
                   help="built-in defaults under the file (default: the file's profile key)")
    p.add_argument("--out", help="override output_dir")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--threads", type=int, help="worker processes for chains")
    p.add_argument("--log-level", default="INFO")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vaeprior", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("gen-reference", help="synthetic reference field and sensor data"))
    _common(sub.add_parser("gen-dataset", help="KLE training fields and manifest"))
    _common(sub.add_parser("train-vae", help="train the VAE on the dataset"))
    p = sub.add_parser("run-mcmc", help="run the chain ensemble for each experiment")
    _common(p)
    p.add_argument("--experiment", action="append", help="experiment name (repeatable)")
    p = sub.add_parser("diagnose", help="MPSRF, AR, DRE, RE_Y and KS tables")
    _common(p)
    p.add_argument("--experiment", action="append", help="experiment name (repeatable)")
    p.add_argument("--baseline", help="experiment used as the KS reference")
    p = sub.add_parser("export", help="convert FLD1/TRC1/KLB1/VAE1 files to CSV/JSON")
    _common(p)
    p.add_argument("files", nargs="+")
    p.add_argument("--dest", help="output directory (default: next to each input)")
    return ap


def run(args) -> None:
    cfg = override(load(args.config, args.profile), args.seed, args.out, args.threads)
    cmd = args.command
    if cmd == "gen-reference":
        pipeline.gen_reference(cfg)
    elif cmd == "gen-dataset":
        pipeline.gen_dataset(cfg)
    elif cmd == "train-vae":
        pipeline.train_vae(cfg)
    elif cmd == "run-mcmc":
        pipeline.run_mcmc(cfg, args.experiment)
    elif cmd == "diagnose":
        pipeline.diagnose(cfg, args.experiment, args.baseline)
    elif cmd == "export":
        for f in args.files:
            for out in pipeline.export(cfg, f, args.dest):
                print(out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

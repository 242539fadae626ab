"""Command-line interface.

Usage::

    anomaly-recon gen-phantom  --config cfg.json [--seed N] [--profile desk|paper] [--force]
    anomaly-recon train STAGE  --config cfg.json ...      STAGE: recon-vae | recon-introvae | disc | seg
    anomaly-recon score VARIANT --config cfg.json ...     VARIANT: vae | introvae | introvae+latsearch
    anomaly-recon evaluate     --config cfg.json ...
    anomaly-recon reproduce-desk [--seed N] [--output-dir DIR] [--force]

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric failure.
The cache root for datasets/checkpoints can be moved with ANOMALY_RECON_CACHE.
"""

import argparse
import json
import os
import sys

from . import pipeline
from .config import ExperimentConfig, resolve_config
from .errors import ConfigError, InvalidArgumentError, MissingArtifactError, NumericFailureError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

_TRAIN_STAGES = ("recon-vae", "recon-introvae", "disc", "seg")
_SCORE_VARIANTS = {"vae": "vae", "introvae": "introvae", "introvae+latsearch": "introvae_latsearch"}


class RunLock:
    """One run owns its output directory; stale locks from dead PIDs are reclaimed."""

    def __init__(self, run_dir: str):
        self.path = os.path.join(run_dir, ".lock")
        self.acquired = False

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        if os.path.exists(self.path):
            try:
                with open(self.path) as fh:
                    pid = int(fh.read().strip() or "0")
            except (OSError, ValueError):
                pid = 0
            if pid and _pid_alive(pid) and pid != os.getpid():
                raise InvalidArgumentError(
                    f"output directory is locked by running process {pid} ({self.path})"
                )
            os.remove(self.path)
        with open(self.path, "w") as fh:
            fh.write(str(os.getpid()))
        self.acquired = True
        return self

    def __exit__(self, *exc):
        if self.acquired and os.path.exists(self.path):
            os.remove(self.path)
        return False


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except OSError:
        return False
    return True


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anomaly-recon",
        description="Normal-anatomy reconstruction, patch-embedding abnormality scoring, and rectified evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON/TOML config file merged over the profile defaults")
        p.add_argument("--seed", type=int, default=None, help="experiment seed (overrides config)")
        p.add_argument("--profile", choices=["desk", "paper"], default=None)
        p.add_argument("--output-dir", default=None)
        p.add_argument("--force", action="store_true", help="overwrite non-empty outputs")

    p = sub.add_parser("gen-phantom", help="generate the phantom dataset")
    common(p)

    p = sub.add_parser("train", help="train one pipeline stage")
    p.add_argument("stage", choices=_TRAIN_STAGES)
    common(p)

    p = sub.add_parser("score", help="score test volumes with one reconstruction variant")
    p.add_argument("variant", choices=sorted(_SCORE_VARIANTS))
    common(p)

    p = sub.add_parser("evaluate", help="aggregate metrics, write report.json/csv and figures")
    common(p)

    p = sub.add_parser("reproduce-desk", help="run the full desk-scale pipeline end to end")
    common(p)

    p = sub.add_parser("show-config", help="print the resolved configuration as JSON")
    common(p)
    return parser


def _resolve(args) -> ExperimentConfig:
    profile = args.profile
    if args.command == "reproduce-desk":
        profile = profile or "desk"
    return resolve_config(args.config, profile, args.seed, output_dir=args.output_dir)


def run_command(args) -> int:
    cfg = _resolve(args)
    if args.command == "show-config":
        print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
        return EXIT_OK
    with RunLock(cfg.output_dir):
        if args.command == "gen-phantom":
            dm = pipeline.stage_gen_phantom(cfg, force=args.force)
            n_train = sum(1 for r in dm["volumes"] if r["split"] == "train")
            n_test = sum(1 for r in dm["volumes"] if r["split"] == "test")
            print(f"dataset ready: {n_train} train / {n_test} test volumes in {pipeline.dataset_dir(cfg)}")
        elif args.command == "train":
            stage = args.stage
            if stage.startswith("recon-"):
                path = pipeline.stage_train_recon(cfg, stage.split("-", 1)[1])
            elif stage == "disc":
                path = pipeline.stage_train_disc(cfg)
            else:
                path = pipeline.stage_train_seg(cfg)
            print(f"checkpoint: {path}")
        elif args.command == "score":
            out = pipeline.stage_score(cfg, _SCORE_VARIANTS[args.variant])
            print(f"score volumes: {out}")
        elif args.command == "evaluate":
            report = pipeline.stage_evaluate(cfg)
            print(f"report: {report}")
        elif args.command == "reproduce-desk":
            result = pipeline.reproduce(cfg, force=args.force)
            print(f"report: {result['report']} (wall time {result['wall_time_s']:.0f}s)")
        else:
            raise ConfigError(f"unknown command {args.command!r}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericFailureError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

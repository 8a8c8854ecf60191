import argparse
import asyncio
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv
from pydantic import ValidationError

from qp_spectral_lab.commands import COMMANDS, run_command, sweep
from qp_spectral_lab.constants import ArtifactNames, ErrorKinds, ExitCodes
from qp_spectral_lab.errors import LabError, ValidationFailure
from qp_spectral_lab.formatters import JSONFormatter
from qp_spectral_lab.settings import ExperimentConfig, RunSettings, SweepAxis

logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")
logger = logging.getLogger(__name__)

DEFAULT_OUT_DIR = Path("qp-lab-out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qp-lab",
        description="Numerical lab for quasi-periodic operators with Gevrey long-range hopping",
    )
    parser.add_argument("--config", type=Path, required=True, help="Experiment config (JSON)")
    parser.add_argument("--out", type=Path, default=None, help="Output directory")
    parser.add_argument("--workers", type=int, default=None, help="Worker threads, overrides the config")
    parser.add_argument("--command", choices=sorted(COMMANDS), default=None, help="Command to run")
    parser.add_argument(
        "--axis",
        choices=[axis.value for axis in SweepAxis],
        default=None,
        help="Sweep the command along this parameter",
    )
    parser.add_argument("--lock", type=Path, default=None, help="Calibration lockfile to apply")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    return parser


def resolve_out_dir(flag: Path | None, config: ExperimentConfig | None) -> Path:
    """--out wins over QPLAB_OUT_DIR, which wins over the config's output_dir."""
    if flag is not None:
        return flag
    override = RunSettings().out_dir
    if override is not None:
        return override
    if config is not None and config.output_dir is not None:
        return config.output_dir
    return DEFAULT_OUT_DIR


async def _run(args: argparse.Namespace, config: ExperimentConfig, out_dir: Path) -> None:
    if args.axis is not None:
        await sweep(config, args.axis, out_dir, command=args.command)
        return
    command = args.command or config.sweep.command
    # Commands block on LAPACK; keep them off the event loop thread
    loop = asyncio.get_running_loop()
    await loop.run_in_executor(None, run_command, command, config, out_dir)


def main(argv: list[str] | None = None) -> int:
    """
    Main entry point for the qp-lab script defined in pyproject.toml. Runs
    one command, or a sweep of it when --axis is given.
    :return: Exit status, 0 on success, 2 on validation errors, 3 on numerical failures
    """
    load_dotenv()
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    config = None
    config_hash = None
    out_dir = resolve_out_dir(args.out, None)
    try:
        config = ExperimentConfig.load(args.config)
        if args.lock is not None:
            config = config.with_calibration_lock(args.lock)
        if args.workers is not None:
            if args.workers < 1:
                raise ValidationFailure(f"Worker count must be at least 1, got {args.workers}", workers=args.workers)
            config = config.model_copy(update={"workers": args.workers})
        config_hash = config.config_hash()
        out_dir = resolve_out_dir(args.out, config)
        asyncio.run(_run(args, config, out_dir))
    except LabError as e:
        logger.error(f"{e.kind}: {e.message}")
        _write_error(out_dir, config_hash, e.to_payload())
        return e.exit_code
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        payload = {
            "kind": ErrorKinds.VALIDATION,
            "message": "Configuration failed validation",
            "details": {"errors": [{"loc": list(map(str, err["loc"])), "msg": err["msg"]} for err in e.errors()]},
        }
        _write_error(out_dir, config_hash, payload)
        return ExitCodes.VALIDATION
    logger.info(f"Artifacts written to {out_dir}")
    return ExitCodes.OK


def _write_error(out_dir: Path, config_hash: str | None, payload: dict) -> None:
    try:
        JSONFormatter(config_hash or "").write(out_dir / ArtifactNames.ERROR, payload)
    except OSError as e:
        logger.warning(f"Could not write {ArtifactNames.ERROR}: {e}")


if __name__ == "__main__":
    sys.exit(main())

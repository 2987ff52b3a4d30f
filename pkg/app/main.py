import argparse
import asyncio
from configparser import ConfigParser
from configparser import Error as ConfigError
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.flipflop import SingularEstimateException, SubsetSizeException
from app.helpers import THREADS
from app.helpers.files import (
    ParseException,
    atomic_write_text,
    format_number,
    read_mxt,
    read_observation_csv,
    read_text,
    write_frame,
)
from app.helpers.linalg import NotPositiveDefiniteException, ShapeException
from app.helpers.logging import VERSION, enable_debug_logging, logger, timed
from app.mmcd import (
    CStepNonConvergenceException,
    DegenerateDataException,
    SubsetBoundsException,
    fast_mmcd,
)
from app.models.config import MMCDConfig, Subsampling
from app.models.files import FitJSON
from app.models.matvar import MatrixStack, ParamSet
from app.models.simulation import Scenario
from app.shapley import QuantileException, detect, shapley
from app.simlab import (
    ContaminationException,
    CovarianceGenerationException,
    run_experiment,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PRECONDITION = 3
EXIT_NUMERICAL = 4

SCENARIO_SECTIONS = ("scenario", "cov_row", "cov_col", "contamination", "mmcd")
# Scenario keys holding comma-separated lists
SCENARIO_LISTS = ("estimators", "n_grid")


class ObservationIndexException(Exception):
    pass


INPUT_ERRORS = (ConfigError, OSError, ParseException, QuantileException, ValidationError)
PRECONDITION_ERRORS = (
    ContaminationException,
    IndexError,
    ObservationIndexException,
    ShapeException,
    SubsetBoundsException,
    SubsetSizeException,
)
NUMERICAL_ERRORS = (
    CovarianceGenerationException,
    CStepNonConvergenceException,
    DegenerateDataException,
    NotPositiveDefiniteException,
    SingularEstimateException,
)


def _read_stack(args: argparse.Namespace) -> MatrixStack:
    """
    MXT input, or CSV when the file ends in `.csv`, then `--rows` and `--cols` give the shape.
    """
    path = Path(args.input)
    if path.suffix.lower() != ".csv":
        return read_mxt(path)
    if args.rows is None or args.cols is None:
        raise ParseException("CSV input requires --rows and --cols")
    return read_observation_csv(path, args.rows, args.cols)


def _read_fit(path: str, stack: MatrixStack) -> FitJSON:
    fit = FitJSON.model_validate_json(read_text(Path(path)))
    if (fit.p, fit.q) != stack.shape:
        raise ShapeException(
            f"Fit is for {fit.p}x{fit.q} observations, input holds {stack.p}x{stack.q}"
        )
    return fit


def _fit_params(fit: FitJSON, raw: bool) -> ParamSet:
    return (fit.raw if raw else fit.reweighted).to_params()


def cmd_fit(args: argparse.Namespace) -> None:
    stack = _read_stack(args)
    cfg = MMCDConfig(
        h=args.h,
        n_initial_subsets=args.m,
        n_keep=min(MMCDConfig().n_keep, args.m),
        rng_seed=args.seed,
        subsampling=Subsampling(args.subsampling),
        threads=args.threads,
    )
    fit = fast_mmcd(stack, cfg)
    atomic_write_text(
        Path(args.output),
        FitJSON.from_fit(fit, cfg).model_dump_json(indent=2) + "\n",
    )
    logger.info("Fit written to %s", args.output)


def cmd_detect(args: argparse.Namespace) -> None:
    stack = _read_stack(args)
    fit = _read_fit(args.fit, stack)
    result = detect(stack, _fit_params(fit, args.raw), args.quantile)
    frame = pd.DataFrame(
        {
            "index": np.arange(stack.n),
            "mmd2": result.distances,
            "cutoff": result.cutoff,
            "flag": result.flags,
        }
    )
    write_frame(Path(args.output), frame)
    logger.info(
        "%i/%i observations flagged, written to %s",
        result.n_flagged,
        stack.n,
        args.output,
    )


def cmd_explain(args: argparse.Namespace) -> None:
    stack = _read_stack(args)
    fit = _read_fit(args.fit, stack)
    if not 0 <= args.index < stack.n:
        raise ObservationIndexException(
            f"Observation index {args.index} out of range [0, {stack.n})"
        )
    report = shapley(stack.data[args.index], _fit_params(fit, args.raw))

    match args.level:
        case "cell":
            frame = pd.DataFrame(
                report.cell,
                columns=[f"col{k}" for k in range(stack.q)],
            )
            frame.insert(0, "row", np.arange(stack.p))
        case "row":
            frame = pd.DataFrame({"row": np.arange(stack.p), "value": report.row})
        case _:
            frame = pd.DataFrame({"col": np.arange(stack.q), "value": report.col})

    residual = abs(float(np.sum(report.cell)) - report.total)
    write_frame(
        Path(args.output),
        frame,
        comments=[
            f"total={format_number(report.total)} efficiency_residual={format_number(residual)}"
        ],
    )


def load_scenario(path: Path) -> Scenario:
    """
    Read an INI scenario file; unknown sections and keys are rejected by name.
    """
    parser = ConfigParser(interpolation=None)
    parser.read_string(read_text(Path(path)), source=str(path))
    unknown = [section for section in parser.sections() if section not in SCENARIO_SECTIONS]
    if unknown:
        raise ParseException(f"Unknown scenario section(s): {', '.join(unknown)}")
    if not parser.has_section("scenario"):
        raise ParseException("Missing [scenario] section")

    fields: dict[str, Any] = dict(parser["scenario"])
    for key in SCENARIO_LISTS:
        if key in fields:
            fields[key] = [item.strip() for item in fields[key].split(",") if item.strip()]
    for section in SCENARIO_SECTIONS[1:]:
        if parser.has_section(section):
            fields[section] = dict(parser[section])
    return Scenario.model_validate(fields)


def cmd_simulate(args: argparse.Namespace) -> None:
    scenario = load_scenario(Path(args.scenario))
    result = asyncio.run(run_experiment(scenario, args.threads))

    comments = [
        f"summary n={row['n']} estimator={row['estimator']} metric={row['metric']}"
        f" mean={row['mean']:.6g} median={row['median']:.6g} sem={row['sem']:.6g} count={row['count']}"
        for row in result.summary().to_dict("records")
    ]
    comments.extend(f"notice {notice}" for notice in result.notices)
    write_frame(Path(args.output), result.to_frame(), comments=comments)
    logger.info("%i records written to %s", len(result.records), args.output)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmcd",
        description="Robust estimation, outlier detection and explanation for matrix-valued data.",
    )
    parser.add_argument("--verbose", action="store_true", help="Enable debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    def _input(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("input", help="MXT file, or CSV with one vec(X) per line")
        sub.add_argument("--rows", type=int, help="p, for CSV input")
        sub.add_argument("--cols", type=int, help="q, for CSV input")
        sub.add_argument("--output", "-o", required=True)

    fit = commands.add_parser("fit", help="Fit raw and reweighted MMCD")
    _input(fit)
    fit.add_argument("--h", type=int, help="Subset size, maximum breakdown by default")
    fit.add_argument("--m", type=int, default=500, help="Number of initial subsets")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--subsampling", choices=[s.value for s in Subsampling], default="auto")
    fit.add_argument("--threads", type=int, default=THREADS)
    fit.set_defaults(handler=cmd_fit)

    det = commands.add_parser("detect", help="Flag outliers against a fit")
    _input(det)
    det.add_argument("--fit", required=True, help="FitJSON from `mmcd fit`")
    det.add_argument("--quantile", type=float, default=0.975)
    det.add_argument("--raw", action="store_true", help="Use the raw instead of the reweighted fit")
    det.set_defaults(handler=cmd_detect)

    exp = commands.add_parser("explain", help="Shapley values of one observation")
    _input(exp)
    exp.add_argument("--fit", required=True, help="FitJSON from `mmcd fit`")
    exp.add_argument("--index", type=int, required=True)
    exp.add_argument("--level", choices=["cell", "row", "col"], default="cell")
    exp.add_argument("--raw", action="store_true", help="Use the raw instead of the reweighted fit")
    exp.set_defaults(handler=cmd_explain)

    sim = commands.add_parser("simulate", help="Run a simulation scenario")
    sim.add_argument("scenario", help="INI scenario file")
    sim.add_argument("--output", "-o", required=True)
    sim.add_argument("--threads", type=int, default=THREADS)
    sim.set_defaults(handler=cmd_simulate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.verbose:
        enable_debug_logging()

    # First log
    logger.info("mmcd-toolkit v%s", VERSION)

    try:
        with timed(f"Command {args.command}"):
            args.handler(args)
    except INPUT_ERRORS as e:
        logger.error("Invalid input: %s", e)
        return EXIT_INPUT
    except PRECONDITION_ERRORS as e:
        logger.error("Precondition failed: %s", e)
        return EXIT_PRECONDITION
    except NUMERICAL_ERRORS as e:
        logger.error("Numerical failure: %s", e)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())

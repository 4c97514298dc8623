"""Command-line interface for space-time EVMFE simulations."""

import argparse
import logging
import sys
from pathlib import Path

from stevmfe.assembly import build_operators
from stevmfe.config import load_config
from stevmfe.driver import SimulationRunner, cell_dof_count, convergence_mesh_spec, convergence_study
from stevmfe.errors import (
    AssemblyError,
    ConfigurationError,
    EliminationError,
    IngestionError,
    NonConvergenceError,
    SingularCoefficientError,
)
from stevmfe.stmesh import build_mesh, enumerate_dofs, validate_matching_times

logger = logging.getLogger(__name__)

EXIT_CONFIGURATION = 2
EXIT_NONCONVERGENCE = 3


def cmd_run(args: argparse.Namespace) -> int:
    """Run a configured simulation.

    Args:
        args: Parsed command-line arguments.

    Returns:
        Exit code (0 for success).
    """
    config = load_config(Path(args.config))
    output_dir = Path(args.output_dir) if args.output_dir else None
    runner = SimulationRunner(config, output_dir)
    state = runner.run()
    logger.info("Completed %d slabs; outputs in %s", state.slab, runner.output_dir)
    return 0


def cmd_converge(args: argparse.Namespace) -> int:
    """Run the manufactured-solution refinement study.

    Args:
        args: Parsed command-line arguments.

    Returns:
        Exit code (0 for success).
    """
    config = load_config(Path(args.config))
    levels = tuple(args.levels) if args.levels else None
    report = convergence_study(config.convergence, config.solver, levels)
    output_dir = Path(args.output_dir) if args.output_dir else config.output.directory
    output_dir.mkdir(parents=True, exist_ok=True)
    path = report.to_csv(output_dir / "error_report.csv")
    for (coarse, fine), row in zip(report.rates(), report.rows[1:], strict=True):
        logger.info("Observed order at h_c=%g: coarse %.3f, fine %.3f", row.h_c, coarse, fine)
    logger.info("Wrote %s", path)
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    """Validate a configuration and build its mesh without solving.

    A config without a mesh block is checked as a refinement study instead.

    Args:
        args: Parsed command-line arguments.

    Returns:
        Exit code (0 for success).
    """
    config = load_config(Path(args.config))
    if config.mesh is not None:
        mesh = build_mesh(config.mesh)
        ratios = validate_matching_times(mesh)
        build_operators(config.model, mesh)
        dofmap = enumerate_dofs(mesh, config.model.fields, config.model.families)
        logger.info("Time refinement ratios across interfaces: %s", ratios or "none")
        logger.info("%d unknowns per slab, %d slabs", dofmap.total, mesh.n_slabs)
    else:
        for n in config.convergence.levels:
            mesh = build_mesh(convergence_mesh_spec(config.convergence, n))
            logger.info("Convergence level h_c=1/%d: %d cell unknowns", n, cell_dof_count(mesh))
    logger.info("Configuration %s is valid", args.config)
    return 0


def main(argv: list[str] | None = None) -> int:
    """Main entry point for CLI.

    Args:
        argv: Arguments to parse; defaults to ``sys.argv``.

    Returns:
        Exit code.
    """
    parser = argparse.ArgumentParser(
        prog="stevmfe",
        description="Space-time enhanced velocity mixed finite element solver",
    )
    parser.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        help="Log per-iteration residuals and factorisation statistics",
    )

    subparsers = parser.add_subparsers(dest="command", required=True)

    run_parser = subparsers.add_parser("run", help="Run a configured simulation")
    run_parser.add_argument("--config", "-c", required=True, help="Path to the JSON run configuration")
    run_parser.add_argument("--output-dir", "-o", help="Override the configured output directory")
    run_parser.set_defaults(func=cmd_run)

    converge_parser = subparsers.add_parser("converge", help="Run the manufactured-solution refinement study")
    converge_parser.add_argument("--config", "-c", required=True, help="Path to the JSON run configuration")
    converge_parser.add_argument("--output-dir", "-o", help="Directory for error_report.csv")
    converge_parser.add_argument(
        "--levels",
        "-l",
        type=int,
        nargs="+",
        help="Coarse cells per unit length to run (default: the configured levels)",
    )
    converge_parser.set_defaults(func=cmd_converge)

    validate_parser = subparsers.add_parser("validate", help="Validate a configuration without solving")
    validate_parser.add_argument("--config", "-c", required=True, help="Path to the JSON run configuration")
    validate_parser.set_defaults(func=cmd_validate)

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
    )

    try:
        result: int = args.func(args)
    except (ConfigurationError, IngestionError) as exc:
        logger.error("Invalid configuration: %s", exc)
        return EXIT_CONFIGURATION
    except NonConvergenceError as exc:
        logger.error("%s", exc)
        return EXIT_NONCONVERGENCE
    except EliminationError as exc:
        logger.error("Linear solve failed: %s", exc)
        return EXIT_NONCONVERGENCE
    except (AssemblyError, SingularCoefficientError) as exc:
        logger.error("Assembly failed: %s", exc)
        return EXIT_NONCONVERGENCE
    return result


if __name__ == "__main__":
    sys.exit(main())

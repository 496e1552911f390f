"""Batch front end: validate, normalize, sweep j, write certificates and tables.

    adverse-control run problem.json [--config run.json] [--mode hyperrelaxed]
                        [--j 5 10 20 40] [--steps 2000] [--tol 1e-5]
                        [--seed 0] [--out runs/example]
    adverse-control report runs/example/certificate.json

Exit codes of `run`: 0 certified, 2 parse or registry error (nothing is
written), 3 validation failure, 4 solver failure or flagged certificate.
Exit codes of `report`: 0 certified, 1 flagged or no sweep data, 2 parse error.
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from .config import RunConfig, load_run_config
from .errors import AdverseControlError, ProblemParseError, UnknownRegistryName
from .nc_solver import NCCertificate, final_trajectory, run_j_sweep
from .problem import ProblemSpec, load_problem, normalize_time, validate
from .schemas import ValidationReport
from .utils import banner, console, format_value, residual_table, status, write_csv, write_json

EXIT_OK = 0
EXIT_FLAGGED = 1
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_SOLVER = 4

CONVERGENCE_HEADER = ["j", "l0", "l1_norm", "omega_mass", "min_residual", "fiber_residual", "active_residual"]


def convergence_rows(certificate: NCCertificate) -> List[List[float]]:
    """One row per solved j, in CONVERGENCE_HEADER order."""
    return [
        [
            record.j,
            record.l0,
            record.l1_norm,
            record.omega_mass,
            record.min_residual,
            record.fiber_residual,
            record.active_residual,
        ]
        for record in certificate.j_history
        if record.solved
    ]


def solve_problem(spec: ProblemSpec, config: RunConfig, verbose: bool = False) -> NCCertificate:
    """Normalize time and run the j-sweep; shared by the cli and the HTTP service."""
    normalized, _ = normalize_time(spec, verbose=verbose)
    return run_j_sweep(normalized, config.j_sequence, config.solver_config(), verbose=verbose)


def write_artifacts(
    out_dir: Path, spec: ProblemSpec, certificate: NCCertificate, validation: ValidationReport
) -> List[Path]:
    """validation.json, j_<j>.json per index, certificate.json, convergence.csv, trajectory.csv."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_json(out_dir / "validation.json", validation)]
    written += [write_json(out_dir / f"j_{record.j}.json", record) for record in certificate.j_history]
    written.append(write_json(out_dir / "certificate.json", certificate))
    written.append(write_csv(out_dir / "convergence.csv", CONVERGENCE_HEADER, convergence_rows(certificate)))
    normalized, _ = normalize_time(spec)
    written.append(final_trajectory(normalized, certificate).to_csv(out_dir / "trajectory.csv"))
    return written


def run(problem_path: Path, config: RunConfig, verbose: bool = True) -> int:
    """Full batch pipeline for one problem file.

    Args:
        problem_path: JSON problem file (read only)
        config: run configuration
        verbose: print status lines

    Returns:
        Process exit code
    """
    banner(f"🎯 Adverse control run: {problem_path}")
    try:
        spec = load_problem(problem_path)
    except UnknownRegistryName as e:
        status(f"❌ Unknown name: {e}")
        return EXIT_PARSE
    except ProblemParseError as e:
        status(f"❌ Parse error: {e}")
        return EXIT_PARSE

    validation = validate(spec, n_samples=config.n_samples, seed=config.seed, verbose=verbose)
    if not validation.passed:
        config.output_dir.mkdir(parents=True, exist_ok=True)
        write_json(config.output_dir / "validation.json", validation)
        failed = [check.name for check in validation.checks if check.status == "fail"]
        status(f"❌ Validation failed: {', '.join(failed)}")
        return EXIT_VALIDATION

    try:
        certificate = solve_problem(spec, config, verbose=verbose)
    except AdverseControlError as e:
        config.output_dir.mkdir(parents=True, exist_ok=True)
        write_json(config.output_dir / "validation.json", validation)
        status(f"❌ Solver failure: {e}")
        return EXIT_SOLVER

    for path in write_artifacts(config.output_dir, spec, certificate, validation):
        status(f"📄 {path}", verbose)
    status(f"🏁 Value = {certificate.value:.6f}, status = {certificate.status}")
    return EXIT_OK if certificate.status == "certified" else EXIT_SOLVER


def load_certificate(path: Path) -> NCCertificate:
    try:
        return NCCertificate.model_validate_json(Path(path).read_text())
    except (OSError, ValidationError) as e:
        raise ProblemParseError(f"Cannot read certificate {path}: {e}") from e


def report(certificate_path: Path) -> int:
    """Print residuals, multipliers and Cauchy diagnostics of a certificate."""
    try:
        certificate = load_certificate(certificate_path)
    except ProblemParseError as e:
        status(f"❌ {e}")
        return EXIT_PARSE

    banner(f"📜 Certificate for {certificate.problem} ({certificate.mode}, j = {certificate.j})")
    if not certificate.j_history:
        status("⚠️  no sweep data")
        return EXIT_FLAGGED

    entries = certificate.residuals.entries
    console.print(
        residual_table(
            [(entry.name, entry.value, entry.tolerance) for entry in entries],
            [not entry.passed for entry in entries],
            title="Necessary conditions",
        )
    )
    multipliers = certificate.multipliers
    console.print(f"l0 = {format_value(multipliers.l0)}, l1 = {format_value(multipliers.l1)}")
    console.print(f"omega: {len(multipliers.omega)} atom(s), mass = {format_value(multipliers.omega_mass)}")
    for atom in multipliers.omega:
        console.print(f"   atom {atom.index}: weight = {format_value(atom.weight)}")
    console.print(f"value = {format_value(certificate.value)}, perturbed value = {format_value(certificate.perturbed_value)}")
    console.print(f"multiplier increments: {format_value(certificate.multiplier_increments)}")
    console.print(f"adjoint increments: {format_value(certificate.adjoint_increments)}")
    if certificate.non_cauchy:
        console.print("[bold red]increments are not non-increasing over j[/bold red]")
    for reason in certificate.reasons:
        console.print(f"[bold red]flagged: {reason}[/bold red]")
    status(f"{'✅' if certificate.status == 'certified' else '⚠️ '} Status: {certificate.status}")
    return EXIT_OK if certificate.status == "certified" else EXIT_FLAGGED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adverse-control",
        description="Necessary-condition certificates for adverse (minimax) control problems.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="validate, solve and certify a problem file")
    run_parser.add_argument("problem", type=Path, help="JSON problem file")
    run_parser.add_argument("--config", type=Path, default=None, help="JSON run configuration")
    run_parser.add_argument("--mode", choices=["relaxed", "hyperrelaxed"], default=None)
    run_parser.add_argument("--j", type=int, nargs="+", default=None, help="increasing mollification indices")
    run_parser.add_argument("--steps", type=int, default=None, help="uniform time steps")
    run_parser.add_argument("--tol", type=float, default=None, help="exchange tolerance")
    run_parser.add_argument("--seed", type=int, default=None, help="validation seed")
    run_parser.add_argument("--out", type=Path, default=None, help="output directory")
    run_parser.add_argument("--quiet", action="store_true", help="only print the final status")

    report_parser = commands.add_parser("report", help="summarize a certificate")
    report_parser.add_argument("certificate", type=Path, help="certificate.json written by run")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        return report(args.certificate)

    overrides = {
        "mode": args.mode,
        "j_sequence": args.j,
        "n_steps": args.steps,
        "tol_exchange": args.tol,
        "seed": args.seed,
        "output_dir": args.out,
    }
    try:
        config = load_run_config(args.config, overrides)
    except ProblemParseError as e:
        status(f"❌ {e}")
        return EXIT_PARSE
    return run(args.problem, config, verbose=not args.quiet)


if __name__ == "__main__":
    sys.exit(main())

import os
from typing import Any, Dict

import uvicorn
from fastapi import FastAPI, HTTPException

from .cli import solve_problem
from .config import load_run_config
from .errors import AdverseControlError, ProblemParseError, UnknownRegistryName
from .problem import ProblemSpec, build_problem, validate
from .schemas import ProblemFile, SolveRequest, ValidateRequest, ValidationReport


def _build(problem: ProblemFile) -> ProblemSpec:
    """Resolve registry names, mapping ingestion errors to 400."""
    try:
        return build_problem(problem)
    except UnknownRegistryName as e:
        raise HTTPException(status_code=400, detail=f"Unknown name: {e}")
    except ProblemParseError as e:
        raise HTTPException(status_code=400, detail=f"Invalid problem: {e}")


# Initialize FastAPI app
app = FastAPI(
    title="Adverse Control API",
    description="Batch validation and necessary-condition certificates for adverse control problems",
    version="0.1.0",
)


@app.get("/")
async def root() -> Dict[str, str]:
    """Basic Root check endpoint."""
    return {"message": "Adverse Control API is running!"}


@app.get("/health")
async def health_check() -> Dict[str, str]:
    """Health check endpoint."""
    return {"status": "healthy", "service": "adverse-control"}


@app.post("/validate", response_model=ValidationReport)
def validate_endpoint(request: ValidateRequest) -> ValidationReport:
    """
    Check the regularity hypotheses of a problem on random samples.

    Args:
        request: ValidateRequest with the problem file and optional sample count and seed

    Returns:
        ValidationReport with one entry per check (failed checks are entries, not errors)
    """
    spec = _build(request.problem)
    config = load_run_config(None, {"n_samples": request.n_samples, "seed": request.seed})
    return validate(spec, n_samples=config.n_samples, seed=config.seed)


@app.post("/solve")
def solve_endpoint(request: SolveRequest) -> Dict[str, Any]:
    """
    Validate, normalize and run the j-sweep for one problem.

    The pipeline is the one of `adverse-control run`:
    1. Validation - a failed hypothesis check returns 422 with the failed checks
    2. Sweep - solves the perturbed problem for every j and certifies the largest one

    Args:
        request: SolveRequest with the problem file and RunConfig overrides

    Returns:
        The certificate as JSON
    """
    spec = _build(request.problem)
    try:
        config = load_run_config(None, request.config)
    except ProblemParseError as e:
        raise HTTPException(status_code=400, detail=f"Invalid configuration: {e}")

    report = validate(spec, n_samples=config.n_samples, seed=config.seed)
    if not report.passed:
        failed = [check.name for check in report.checks if check.status == "fail"]
        raise HTTPException(status_code=422, detail=f"Validation failed: {', '.join(failed)}")

    try:
        certificate = solve_problem(spec, config)
    except AdverseControlError as e:
        raise HTTPException(status_code=500, detail=f"Solver failure: {str(e)}")
    return certificate.model_dump(mode="json")


if __name__ == "__main__":
    port = int(os.getenv("PORT", 8000))
    uvicorn.run("adverse_control.main:app", host="0.0.0.0", port=port)

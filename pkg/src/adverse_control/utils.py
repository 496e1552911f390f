import json
from pathlib import Path
from typing import Any, Sequence, Union

import numpy as np
from pydantic import BaseModel
from rich.console import Console
from rich.table import Table

console = Console()


def status(message: str, verbose: bool = True) -> None:
    """Print one pipeline status line when verbose."""
    if verbose:
        console.print(message, markup=False, highlight=False)


def banner(title: str) -> None:
    """Print a section title over a rule of equals signs.

    Args:
        title: heading text
    """
    console.print(title)
    console.print("=" * 40)


def dump_json(model: BaseModel) -> str:
    """Deterministic JSON text of a model: sorted keys, fixed indentation.

    Args:
        model: any pydantic model

    Returns:
        JSON string ending with a newline
    """
    return json.dumps(model.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


def write_json(path: Union[str, Path], model: BaseModel) -> Path:
    """Write a model with `dump_json`, replacing any existing file.

    Args:
        path: destination file
        model: any pydantic model

    Returns:
        The path written
    """
    path = Path(path)
    path.write_text(dump_json(model))
    return path


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Any) -> Path:
    """Write a numeric table with a header row and round-trip float formatting."""
    path = Path(path)
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size == 0:
        rows = rows.reshape(0, len(header))
    np.savetxt(path, rows, delimiter=",", header=",".join(header), comments="", fmt="%.17g")
    return path


def format_value(value: Any) -> str:
    """Short human-readable form of a residual, multiplier or vector."""
    if value is None:
        return "-"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(format_value(item) for item in np.ravel(value)) + "]"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def residual_table(rows: Sequence[Sequence[Any]], flagged: Sequence[bool], title: str) -> Table:
    """Render (name, value, tolerance) rows; flagged rows are highlighted in red.

    Args:
        rows: (name, value, tolerance) triples
        flagged: one flag per row
        title: table title

    Returns:
        A rich Table ready for console.print
    """
    table = Table(title=title)
    table.add_column("Condition")
    table.add_column("Value", justify="right")
    table.add_column("Tolerance", justify="right")
    for (name, value, tolerance), bad in zip(rows, flagged):
        table.add_row(name, format_value(value), format_value(tolerance), style="bold red" if bad else None)
    return table

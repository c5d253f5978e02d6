"""Command-line sub-commands. Each module exposes register(subparsers)."""
import csv
from pathlib import Path
from typing import Iterable, Sequence

EXIT_OK = 0
EXIT_CHAIN_INVALID = 1
EXIT_CONFIG_INVALID = 2
EXIT_INVARIANT_VIOLATION = 3


def fmt(value: float) -> str:
    """Console float format: 10 significant digits."""
    return f"{value:.10g}"


def output_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Write a UTF-8 CSV; floats are written with repr so they read back exactly."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])

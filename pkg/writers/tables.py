"""CSV writers for step tables, event logs and debug dumps."""

import csv
import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Union

logger = logging.getLogger(__name__)

FORCES_HEADER = ["step", "load", "f_n", "f_t", "dofs", "events"]
EVENTS_HEADER = [
    "step", "event", "elements_before", "elements_after", "dofs_before", "dofs_after", "f_n", "f_t",
]
PRESSURE_HEADER = ["step", "volume_ratio", "pressure", "pressure_analytic", "residual", "iterations"]
CONTACT_HEADER = ["step", "center_x", "center_y", "center_z", "f_n", "f_t", "active_elements"]


def format_value(value) -> str:
    """Floats in shortest round-trip form so reruns are byte-identical."""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """
    Write a CSV file with a header row.

    Args:
        path: Target file (parent directories are created)
        header: Column names
        rows: Row sequences, same length as the header

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            if len(row) != len(header):
                logger.error(f"Row {row} does not match header {list(header)}")
                raise ValueError(f"row has {len(row)} columns, header has {len(header)}")
            writer.writerow([format_value(v) for v in row])
            count += 1
    logger.debug(f"Wrote {count} rows to {path}")
    return path


def read_csv(path: Union[str, Path]) -> List[dict]:
    with Path(path).open(newline="") as handle:
        return list(csv.DictReader(handle))

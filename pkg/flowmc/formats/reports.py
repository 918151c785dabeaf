"""CSV outputs. Floats are written with repr so equal runs give equal bytes."""

import csv
from pathlib import Path
from typing import Any, Dict, Iterable, Sequence, Union

from flowmc.schemas import ExperimentReport

REPORT_COLUMNS = ["iteration", "samples", "loss", "estimate", "variance", "weight_p9999", "wallclock_ms"]


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows(path: Union[str, Path], columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format(row[c]) for c in columns])


def write_report_csv(path: Union[str, Path], report: ExperimentReport) -> None:
    write_rows(path, REPORT_COLUMNS, (r.model_dump() for r in report.iterations))


def write_key_values(path: Union[str, Path], rows: Iterable[Dict[str, Any]]) -> None:
    write_rows(path, ["key", "value"], rows)

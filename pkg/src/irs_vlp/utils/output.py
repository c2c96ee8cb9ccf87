"""CSV and JSON writers for plot-ready results."""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Mapping

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("k", "sigma2", "inv_sigma2_db", "series", "value_m", "trials", "seed")


def format_value(value: Any) -> str:
    """repr() for floats so identical runs produce identical bytes."""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, rows: Iterable[Mapping[str, Any]], columns: tuple[str, ...] = CSV_COLUMNS) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row[c]) for c in columns])
    logger.info(f"Wrote {path}")
    return path


def write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    logger.info(f"Wrote {path}")
    return path


def dumps(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True)


def output_stem(subcommand: str, seed: int | None = None) -> str:
    """File stem shared by a run's CSV, JSON and manifest, e.g. ``rmse-vs-k_seed3``."""
    return subcommand if seed is None else f"{subcommand}_seed{seed}"

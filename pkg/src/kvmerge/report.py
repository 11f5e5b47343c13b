"""CSV/JSON emission with fixed schemas."""

from __future__ import annotations

import csv
import io
import json
from typing import Iterable, Sequence

from .harness import SimulationResult

STEP_COLUMNS = ("seed", "step", "cache_len", "algorithm", "l2_error", "cos_error", "merges", "fallbacks")
SIMULATE_SUMMARY_KEYS = ("algo", "mean_error", "p95_error", "final_cache_len", "fallback_rate")
COMPARE_COLUMNS = ("algo", "mean_error", "median_error", "p95_error", "final_cache_len", "fallback_rate", "seeds")
SPECTRUM_COLUMNS = ("head", "mode_index", "lambda", "cumulative_energy", "c_i")


def _cell(x):
    if isinstance(x, float):
        return repr(x)
    return x


def csv_text(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)  # excel dialect: CRLF line ends, minimal RFC-4180 quoting
    w.writerow(columns)
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} cells, schema has {len(columns)}")
        w.writerow([_cell(x) for x in row])
    return buf.getvalue()


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(columns, rows))


def step_rows(seed: int, result: SimulationResult):
    for t, l2 in enumerate(result.per_step_l2_error):
        yield (
            seed,
            t,
            result.per_step_cache_len[t],
            result.algorithm,
            float(l2),
            float(result.per_step_cos_error[t]),
            result.per_step_merges[t],
            result.per_step_fallbacks[t],
        )


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        fh.write(json_text(obj))

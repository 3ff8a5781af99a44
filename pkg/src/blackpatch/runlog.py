"""Run logging: one JSON record per line, curve export, query accounting.

Records are emitted only at query-consuming boundaries (initialization and
optimization steps), so the cumulative query count is strictly increasing
across a log.  Square switches and noise decays are query-free; they ride
on the first step record that follows, with event precedence
decay > square-switch > step.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

__all__ = [
    "LogError",
    "RunRecord",
    "accounting_formula",
    "export_curve",
    "format_record",
    "parse_log",
    "read_log",
]

EVENTS = ("init", "step", "square-switch", "decay")
FIELDS = ("queries", "iter", "step", "omega_star", "omega", "epsilon",
          "square_r", "square_c", "square_e", "event")


class LogError(ValueError):
    """Corrupt or inconsistent run log; carries the 1-based line number."""

    def __init__(self, message, line_number):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass
class RunRecord:
    queries: int
    iter: int
    step: int
    omega_star: float
    omega: float
    epsilon: float
    square_r: int
    square_c: int
    square_e: int
    event: str


def format_record(record):
    d = asdict(record)
    return json.dumps({k: d[k] for k in FIELDS}, separators=(",", ":"))


def parse_line(line, line_number):
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as exc:
        raise LogError(f"invalid JSON ({exc.msg})", line_number) from None
    missing = [k for k in FIELDS if k not in raw]
    if missing:
        raise LogError(f"missing fields {missing}", line_number)
    if raw["event"] not in EVENTS:
        raise LogError(f"unknown event {raw['event']!r}", line_number)
    return RunRecord(**{k: raw[k] for k in FIELDS})


def parse_log(text):
    """Parse log text into records, enforcing strictly increasing queries."""
    records = []
    prev = None
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        rec = parse_line(line, i)
        if prev is not None and rec.queries <= prev:
            raise LogError(
                f"query count {rec.queries} does not increase over {prev} "
                "(concatenated or reordered logs?)",
                i,
            )
        prev = rec.queries
        records.append(rec)
    return records


def read_log(path):
    with open(path, "r", encoding="ascii") as f:
        return parse_log(f.read())


def export_curve(records):
    """(queries, omega_star) staircase of strict improvements, CSV rows."""
    rows = ["queries,omega_star"]
    best = None
    for rec in records:
        if best is None or rec.omega_star > best:
            best = rec.omega_star
            rows.append(f"{rec.queries},{rec.omega_star!r}")
    return "\n".join(rows) + "\n"


def accounting_formula(records, n_probes, n_val):
    """Closed-form expected query total for a single-training-sample run.

    init costs 2*n_val (patched evaluation plus cold references); every
    step costs n_probes + 1 (the baseline evaluation of the updated patch)
    + n_val (validation), and the lone training sample's black reference
    is paid once on the first step.  Returns (expected_total, formula).
    """
    if not records or records[0].event != "init":
        raise LogError("log does not start with an init record", 1)
    n_steps = sum(1 for r in records if r.event != "init")
    expected = 2 * n_val + n_steps * (n_probes + 1 + n_val) + (1 if n_steps else 0)
    formula = (
        f"2*{n_val} + {n_steps}*({n_probes} + 1 + {n_val})"
        + (" + 1" if n_steps else "")
    )
    return expected, formula

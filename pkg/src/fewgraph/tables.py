"""Render evaluation reports as aligned text and CSV."""

from __future__ import annotations

import csv
import io

from .harness import EvalReport

COLUMNS = (
    "model", "mode", "k", "q", "labeled-fraction", "policy",
    "episodes", "accuracy", "half-width", "hit-rate", "config-hash",
)


def _cell(report: EvalReport, column: str) -> str:
    val = getattr(report, column.replace("-", "_"))
    if val is None:
        return "n/a"
    if column in ("accuracy", "half-width", "hit-rate"):
        return f"{100 * val:.2f}"
    return str(val)


def emit_tables(reports: list[EvalReport]) -> tuple[str, str]:
    """(aligned text table, CSV text); accuracy-like columns in percent."""
    rows = [[_cell(r, c) for c in COLUMNS] for r in reports]

    widths = [max(len(c), *(len(row[i]) for row in rows)) if rows else len(c)
              for i, c in enumerate(COLUMNS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(COLUMNS, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    writer.writerows(rows)
    return text, buf.getvalue()


def parse_csv(csv_text: str) -> list[list[str]]:
    """Rows of the CSV emitted above, header excluded."""
    reader = csv.reader(io.StringIO(csv_text))
    rows = list(reader)
    if rows and rows[0] == list(COLUMNS):
        rows = rows[1:]
    return rows

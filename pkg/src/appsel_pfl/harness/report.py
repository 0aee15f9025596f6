"""Compare run reports against a designated baseline."""
from __future__ import annotations

import json
from collections.abc import Sequence
from pathlib import Path

METRICS = ("accuracy", "cder", "disambiguation_rate", "epsilon_spent")


class ComparisonError(ValueError):
    pass


def load_report(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    try:
        rep = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ComparisonError(f"{path}: unreadable report ({exc})") from None
    rep.setdefault("name", path.parent.name)
    return rep


def compare(reports: Sequence[dict], baseline: int = 0) -> list[dict]:
    """One row per report with absolute metrics and deltas against ``reports[baseline]``.

    ``relative_accuracy_improvement`` is (acc - base_acc) / base_acc.
    """
    if len(reports) < 2:
        raise ComparisonError("need at least two reports to compare")
    if not 0 <= baseline < len(reports):
        raise ComparisonError(f"baseline index {baseline} out of range")
    hashes = {r.get("dataset_hash") for r in reports}
    if len(hashes) != 1 or None in hashes:
        raise ComparisonError(f"reports were evaluated on different validation sets: {sorted(map(str, hashes))}")
    base = reports[baseline]["final"]
    rows = []
    for i, rep in enumerate(reports):
        fin = rep["final"]
        row = {"name": rep.get("name", str(i)), "baseline": i == baseline}
        for m in METRICS:
            row[m] = fin.get(m)
        for m in ("accuracy", "cder", "disambiguation_rate"):
            a, b = fin.get(m), base.get(m)
            row[f"delta_{m}"] = None if a is None or b is None else a - b
        a, b = fin.get("accuracy"), base.get("accuracy")
        row["relative_accuracy_improvement"] = (None if a is None or not b else (a - b) / b)
        rows.append(row)
    return rows


def _fmt(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, bool):
        return "*" if x else ""
    if isinstance(x, float):
        return f"{x:+.4f}" if x < 0 else f"{x:.4f}"
    return str(x)


def format_table(rows: Sequence[dict]) -> str:
    cols = ["name", "baseline", "accuracy", "delta_accuracy", "relative_accuracy_improvement",
            "cder", "delta_cder", "disambiguation_rate", "epsilon_spent"]
    cells = [[c for c in cols]] + [[_fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(row[j]) for row in cells) for j in range(len(cols))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells)

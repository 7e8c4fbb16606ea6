"""Plain-text experiment tables and CSV bundles."""

from __future__ import annotations

import os

from .divergence import DivergenceReport
from .metrics import MetricsReport


def format_table(rows: list[dict[str, object]], columns: list[str]) -> str:
    """Fixed-order, fixed-width table; deterministic for identical inputs."""
    rendered = [[str(row.get(col, "")) for col in columns] for row in rows]
    widths = [
        max(len(col), *(len(r[i]) for r in rendered)) if rendered else len(col)
        for i, col in enumerate(columns)
    ]
    def line(cells):
        return "  ".join(cell.ljust(w) for cell, w in zip(cells, widths)).rstrip()

    out = [line(columns), line(["-" * w for w in widths])]
    out.extend(line(r) for r in rendered)
    return "\n".join(out)


def metrics_rows(named: dict[str, MetricsReport]) -> list[dict[str, object]]:
    rows = []
    for name in sorted(named):
        m = named[name]
        rows.append(
            {
                "run": name,
                "map": f"{m.simplified_map:.4f}",
                "translation": f"{m.mean_translation_error:.4f}",
                "matches": m.n_matches,
                "scenes": m.n_eval_scenes,
            }
        )
    return rows


def summarize(
    metrics: dict[str, MetricsReport],
    divergences: dict[str, DivergenceReport] | None = None,
) -> str:
    """One table per experiment block: runs as rows, metrics as columns."""
    sections = []
    columns = ["run", "map", "translation", "matches", "scenes"]
    sections.append(format_table(metrics_rows(metrics), columns))
    if divergences:
        rows = []
        for name in sorted(divergences):
            d = divergences[name]
            rows.append(
                {
                    "run": name,
                    "space": d.space,
                    "js": f"{d.js:.6f}",
                    "h_proxy": f"{d.h_proxy:.4f}",
                }
            )
        sections.append(format_table(rows, ["run", "space", "js", "h_proxy"]))
    return "\n\n".join(sections) + "\n"


def write_metrics_csv(name: str, report: MetricsReport, out_dir: str) -> str:
    path = os.path.join(out_dir, f"{name}.metrics.csv")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("run," + MetricsReport.CSV_HEADER + "\n")
        fh.write(f"{name},{report.csv_row()}\n")
    os.replace(tmp, path)
    return path


def collect_metrics_csvs(out_dir: str) -> list[str]:
    lines = ["run," + MetricsReport.CSV_HEADER]
    for entry in sorted(os.listdir(out_dir)):
        if not entry.endswith(".metrics.csv"):
            continue
        with open(os.path.join(out_dir, entry), "r", encoding="utf-8") as fh:
            body = fh.read().strip().splitlines()
        lines.extend(body[1:])
    return lines

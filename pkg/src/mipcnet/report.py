"""Result-table emission: markdown and CSV with identical numeric content,
plus a rendered figure next to the delimited output. Column order follows
the reporting convention: DSC (higher is better) before HD (lower is
better), each annotated with its direction arrow."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .ablation import ResultTable

_COLUMNS = ["cell", "DSC↑ mean", "DSC↑ std", "HD↓ mean", "HD↓ std",
            "seeds", "params", "config", "status"]


def _format_rows(table: ResultTable) -> list[list[str]]:
    rows = []
    for r in table.rows:
        rows.append([
            r.name,
            f"{r.dsc_mean:.4f}", f"{r.dsc_std:.4f}",
            f"{r.hd_mean:.4f}", f"{r.hd_std:.4f}",
            str(r.n_seeds), str(r.param_count), r.config_hash, r.status,
        ])
    return rows


def table_to_markdown(table: ResultTable) -> str:
    if not table.rows:
        raise ValueError("result table has no rows")
    lines = [f"## Ablation axis: {table.axis}", "", f"_{table.disclaimer}_", ""]
    lines.append("| " + " | ".join(_COLUMNS) + " |")
    lines.append("| " + " | ".join("---" for _ in _COLUMNS) + " |")
    for row in _format_rows(table):
        lines.append("| " + " | ".join(row) + " |")
    for note in table.notes:
        lines.append(f"\n- {note}")
    return "\n".join(lines) + "\n"


def table_to_csv(table: ResultTable) -> str:
    if not table.rows:
        raise ValueError("result table has no rows")
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(_COLUMNS)
    writer.writerows(_format_rows(table))
    return buf.getvalue()


def plot_table(table: ResultTable, path: str | Path) -> Path:
    """Bar chart of per-cell DSC and HD with std error bars."""
    if not table.rows:
        raise ValueError("result table has no rows")
    names = [r.name for r in table.rows]
    fig, (ax_dsc, ax_hd) = plt.subplots(1, 2, figsize=(max(6, 1.6 * len(names)), 3.2))
    ax_dsc.bar(names, [r.dsc_mean for r in table.rows],
               yerr=[r.dsc_std for r in table.rows], color="#4878d0", capsize=3)
    ax_dsc.set_ylabel("DSC ↑")
    ax_dsc.set_ylim(0, 1.05)
    ax_hd.bar(names, [r.hd_mean for r in table.rows],
              yerr=[r.hd_std for r in table.rows], color="#d65f5f", capsize=3)
    ax_hd.set_ylabel("HD ↓")
    for ax in (ax_dsc, ax_hd):
        ax.tick_params(axis="x", rotation=45)
    fig.suptitle(f"{table.axis} | {table.disclaimer}", fontsize=9)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def emit_report(
    table: ResultTable,
    out_dir: str | Path,
    formats: tuple[str, ...] = ("markdown", "csv"),
    plot: bool = True,
) -> dict[str, Path]:
    """Write the table in each requested format plus the figure.

    Returns {artifact name: path}. Markdown and CSV carry the same
    formatted numbers, so they round-trip against each other.
    """
    out = Path(out_dir)
    written: dict[str, Path] = {}
    tables_dir = out / "tables"
    tables_dir.mkdir(parents=True, exist_ok=True)
    for fmt in formats:
        if fmt == "markdown":
            p = tables_dir / f"{table.axis}.md"
            p.write_text(table_to_markdown(table))
        elif fmt == "csv":
            p = tables_dir / f"{table.axis}.csv"
            p.write_text(table_to_csv(table))
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written[fmt] = p
    if plot:
        written["plot"] = plot_table(table, out / "plots" / f"{table.axis}.png")
    return written


def parse_markdown_numbers(md: str) -> list[list[str]]:
    """Numeric cells of a markdown table (for round-trip checks)."""
    rows = []
    for line in md.splitlines():
        if not line.startswith("|") or set(line.replace("|", "").strip()) <= {"-", " "}:
            continue
        cells = [c.strip() for c in line.strip("|").split("|")]
        if cells and cells[0] != _COLUMNS[0]:
            rows.append(cells)
    return rows


def parse_csv_numbers(text: str) -> list[list[str]]:
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    return rows[1:]

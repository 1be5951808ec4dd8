"""Render results CSVs as tables (datasets x modes, mean±std cells) or
as accuracy series (x,mean,std CSV, one row per shots/fraction value).

Reports are pure functions of the results file; nothing here re-trains.
"""

from __future__ import annotations

from .errors import ConfigError
from .train import ResultRow, aggregate, format_mean_std


def _filter(rows: list[ResultRow], mode: str | None, dataset: str | None) -> list[ResultRow]:
    if mode:
        rows = [r for r in rows if r.mode == mode]
    if dataset:
        rows = [r for r in rows if r.dataset == dataset]
    return rows


def render_table(rows: list[ResultRow], mode: str | None = None, dataset: str | None = None) -> str:
    """Datasets down the side, mode/config columns across, "mean±std" cells."""
    rows = _filter(rows, mode, dataset)
    if not rows:
        return ""
    ks_per_mode: dict[str, set[str]] = {}
    for r in rows:
        ks_per_mode.setdefault(r.mode, set()).add(r.k_or_fraction)

    def col_key(r: ResultRow) -> str:
        if len(ks_per_mode[r.mode]) > 1:
            return f"{r.mode}[{r.k_or_fraction}]"
        return r.mode

    cells: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        cells.setdefault((r.dataset, col_key(r)), []).append(r.test_top1)
    datasets = sorted({d for d, _ in cells})
    cols = sorted({c for _, c in cells})
    rendered = {
        key: format_mean_std(aggregate(vals), percent=True) for key, vals in cells.items()
    }
    widths = [max(len("dataset"), *(len(d) for d in datasets))]
    widths += [max(len(c), *(len(rendered.get((d, c), "-")) for d in datasets)) for c in cols]
    lines = [" | ".join(h.ljust(w) for h, w in zip(["dataset"] + cols, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    for d in datasets:
        row = [d.ljust(widths[0])]
        row += [rendered.get((d, c), "-").ljust(w) for c, w in zip(cols, widths[1:])]
        lines.append(" | ".join(row))
    return "\n".join(lines) + "\n"


def render_series(rows: list[ResultRow], mode: str | None = None, dataset: str | None = None,
                  baseline: float | None = None) -> str:
    """CSV "x,mean,std" (percent), sorted and duplicate-free by x; the
    optional baseline emits one trailing reference row."""
    rows = _filter(rows, mode, dataset)
    if not rows:
        return ""
    by_x: dict[float, list[float]] = {}
    for r in rows:
        try:
            x = float(r.k_or_fraction)
        except ValueError:
            raise ConfigError(f"non-numeric series x value {r.k_or_fraction!r}")
        by_x.setdefault(x, []).append(r.test_top1)
    lines = ["x,mean,std"]
    for x in sorted(by_x):
        agg = aggregate(by_x[x])
        lines.append(f"{x:g},{agg.mean * 100:.2f},{agg.std * 100:.2f}")
    if baseline is not None:
        lines.append(f"baseline,{baseline:.2f},0.00")
    return "\n".join(lines) + "\n"

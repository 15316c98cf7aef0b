"""Report emission: delimited tables plus rendered figures.

Every CSV starts with a comment header carrying the config hash and seed, so
a report is attributable to the exact configuration that produced it, and
reruns can be byte-compared. Alongside each CSV the experiment drivers render
a matplotlib figure (PNG) and a plain-text table for quick reading.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import DataError


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)


def write_csv(
    path: str | Path,
    columns: list[str],
    rows: list[list],
    config_hash: str,
    seed: int,
) -> None:
    with open(path, "w") as f:
        f.write(f"# config_hash={config_hash} seed={seed}\n")
        f.write(",".join(columns) + "\n")
        for row in rows:
            if len(row) != len(columns):
                raise DataError(f"row has {len(row)} cells, header has {len(columns)}")
            f.write(",".join(format_value(v) for v in row) + "\n")


def read_csv(path: str | Path) -> tuple[dict[str, str], list[str], list[list[str]]]:
    """Read back a report CSV: (header metadata, columns, string rows)."""
    meta: dict[str, str] = {}
    columns: list[str] = []
    rows: list[list[str]] = []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, value = tok.partition("=")
                    if value:
                        meta[key] = value
                continue
            if not columns:
                columns = line.split(",")
            else:
                rows.append(line.split(","))
    if not columns:
        raise DataError(f"{path}: no header row")
    return meta, columns, rows


def text_table(columns: list[str], rows: list[list]) -> str:
    """Fixed-width table for console output and report.txt files."""
    cells = [[format_value(v) for v in row] for row in rows]
    widths = [
        max(len(columns[i]), *(len(r[i]) for r in cells)) if cells else len(columns[i])
        for i in range(len(columns))
    ]
    lines = [
        "  ".join(c.ljust(w) for c, w in zip(columns, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for r in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def _finish(fig, path: Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_shape_sweep(rows: list[dict], path: str | Path) -> None:
    """Uniqueness vs codebook size, one line per seed."""
    fig, ax = plt.subplots(figsize=(6, 4))
    seeds = sorted({r["seed"] for r in rows})
    for seed in seeds:
        pts = sorted((r["k"], r["uniqueness"]) for r in rows if r["seed"] == seed)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"seed {seed}")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("codebook size K (per level)")
    ax.set_ylabel("uniqueness")
    ax.set_title("SID uniqueness vs codebook size")
    ax.grid(True, alpha=0.3)
    ax.legend()
    _finish(fig, Path(path))


def plot_ablation(rows: list[dict], path: str | Path) -> None:
    """Mean uniqueness per treatment with per-seed scatter."""
    fig, ax = plt.subplots(figsize=(6.5, 4))
    treatments = []
    for r in rows:
        if r["treatment"] not in treatments:
            treatments.append(r["treatment"])
    means = []
    for i, t in enumerate(treatments):
        vals = [r["uniqueness"] for r in rows if r["treatment"] == t]
        means.append(sum(vals) / len(vals))
        ax.scatter([i] * len(vals), vals, color="black", zorder=3, s=14)
    ax.bar(range(len(treatments)), means, color="#4C72B0", alpha=0.85)
    ax.set_xticks(range(len(treatments)))
    ax.set_xticklabels(treatments, rotation=20, ha="right")
    ax.set_ylabel("uniqueness")
    ax.set_title("Collapse mitigation: uniqueness by treatment")
    ax.grid(True, axis="y", alpha=0.3)
    _finish(fig, Path(path))


def plot_depth_breadth(rows: list[dict], path: str | Path) -> None:
    """Grouped bars of recall/NDCG per mapping variant."""
    fig, ax = plt.subplots(figsize=(7, 4))
    variants = []
    for r in rows:
        if r["variant"] not in variants:
            variants.append(r["variant"])
    metrics = ["recall_at_5", "recall_at_10", "ndcg_at_5", "ndcg_at_10", "set_recall"]
    width = 0.8 / len(metrics)
    for j, m in enumerate(metrics):
        vals = []
        for v in variants:
            per_seed = [r[m] for r in rows if r["variant"] == v]
            vals.append(sum(per_seed) / len(per_seed))
        xs = [i + j * width for i in range(len(variants))]
        ax.bar(xs, vals, width=width, label=m.replace("_at_", "@"))
    ax.set_xticks([i + 2 * width for i in range(len(variants))])
    ax.set_xticklabels(variants, rotation=12, ha="right", fontsize=8)
    ax.set_ylabel("metric value")
    ax.set_title("Budget allocation: depth vs breadth")
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    _finish(fig, Path(path))


def plot_history_sweep(rows: list[dict], path: str | Path) -> None:
    """Recall@5 vs history length, one line per seed."""
    fig, ax = plt.subplots(figsize=(6, 4))
    seeds = sorted({r["seed"] for r in rows})
    for seed in seeds:
        pts = sorted(
            (r["max_history"], r["recall_at_5"]) for r in rows if r["seed"] == seed
        )
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"seed {seed}")
    ax.set_xlabel("max history (items)")
    ax.set_ylabel("Recall@5")
    ax.set_title("Retrieval accuracy vs history length")
    ax.grid(True, alpha=0.3)
    ax.legend()
    _finish(fig, Path(path))


def relative_view(
    rows: list[dict], key: str, metrics: list[str], baseline_value
) -> tuple[list[str], list[list]]:
    """Relative-to-baseline presentation: a Baseline row plus +x% rows.

    Rows are averaged over seeds per variant; the variant whose key equals
    baseline_value becomes "Baseline" and the rest show relative deltas.
    """
    variants = []
    for r in rows:
        if r[key] not in variants:
            variants.append(r[key])
    averaged = {}
    for v in variants:
        sel = [r for r in rows if r[key] == v]
        averaged[v] = {m: sum(r[m] for r in sel) / len(sel) for m in metrics}
    if baseline_value not in averaged:
        raise DataError(f"baseline {baseline_value!r} not among variants {variants}")
    base = averaged[baseline_value]
    columns = [key] + metrics
    out_rows: list[list] = []
    for v in variants:
        if v == baseline_value:
            out_rows.append([v] + ["Baseline"] * len(metrics))
            continue
        cells = [v]
        for m in metrics:
            if base[m] == 0:
                cells.append("n/a")
            else:
                pct = 100.0 * (averaged[v][m] - base[m]) / base[m]
                cells.append(f"{pct:+.1f}%")
        out_rows.append(cells)
    return columns, out_rows

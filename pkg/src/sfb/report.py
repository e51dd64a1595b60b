"""Aggregate per-seed accuracies into mean and standard error tables."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

METHOD_ORDER = ("ERM", "IRM", "SFB-no-adapt", "SFB", "PL-naive", "GT-adapt", "Oracle")


@dataclass(frozen=True)
class ResultRow:
    method: str
    dataset: str
    mean: float
    se: float | None  # None when fewer than two seeds
    n_seeds: int


def aggregate(rows) -> list:
    """``rows`` are dicts with method, dataset and accuracy (one per seed)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["method"], r["dataset"]), []).append(float(r["accuracy"]))
    out = []
    for (method, dataset), vals in groups.items():
        v = np.asarray(vals)
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) >= 2 else None
        out.append(ResultRow(method, dataset, float(v.mean()), se, len(v)))
    rank = {m: i for i, m in enumerate(METHOD_ORDER)}
    return sorted(out, key=lambda r: (rank.get(r.method, len(rank)), r.method, r.dataset))


def format_cell(row: ResultRow) -> str:
    se = "n/a" if row.se is None else f"{100 * row.se:.1f}"
    return f"{100 * row.mean:.1f} ± {se}"


def render_table(results) -> str:
    """Methods as rows, datasets as columns; the best mean per column is bolded."""
    datasets = list(dict.fromkeys(r.dataset for r in results))
    methods = list(dict.fromkeys(r.method for r in results))
    cell = {(r.method, r.dataset): r for r in results}
    best = {}
    for d in datasets:
        col = [r for r in results if r.dataset == d]
        top = max(round(100 * r.mean, 1) for r in col)
        best[d] = {r.method for r in col if round(100 * r.mean, 1) == top}
    body = []
    for m in methods:
        line = [m]
        for d in datasets:
            r = cell.get((m, d))
            if r is None:
                line.append("-")
            else:
                text = format_cell(r)
                line.append(f"**{text}**" if m in best[d] else text)
        body.append(line)
    header = ["method", *datasets]
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]

    def fmt(row):
        return " | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()

    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule, *map(fmt, body)]) + "\n"


def write_results(results, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "dataset", "mean", "se", "n_seeds"])
        for r in results:
            w.writerow([r.method, r.dataset, repr(r.mean), "n/a" if r.se is None else repr(r.se), r.n_seeds])


def write_report(results, path):
    Path(path).write_text(render_table(results), encoding="utf-8")


def read_per_seed(paths) -> list:
    rows = []
    for p in paths:
        with open(p, newline="") as f:
            rows += list(csv.DictReader(f))
    return rows


def report(paths, out_dir) -> str:
    """Rebuild results.csv and report.txt in ``out_dir`` from per-seed CSV files."""
    results = aggregate(read_per_seed(paths))
    if not results:
        raise ValueError("no result rows found")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_results(results, out_dir / "results.csv")
    write_report(results, out_dir / "report.txt")
    return render_table(results)

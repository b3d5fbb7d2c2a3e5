"""Render benchmark results as CSV tables, a text summary, and a PNG figure.

Output is a pure function of the result: the same result renders to
byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import BenchResult  # noqa: E402

RESULTS_CSV = "results.csv"
SAMPLES_CSV = "samples.csv"
SUMMARY_TXT = "summary.txt"
FIGURE_PNG = "figure.png"
COLUMNS = ("series", "value", "mean", "ci_low", "ci_high", "n")


class EmptyTable(ValueError):
    pass


def _f(x: float) -> str:
    return f"{x:.6f}"


def results_csv(result: BenchResult) -> str:
    if not result.rows:
        raise EmptyTable("nothing to report: the stats table is empty")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in result.rows:
        w.writerow([r.series, r.value, _f(r.mean), _f(r.ci_low), _f(r.ci_high), r.n])
    return buf.getvalue()


def samples_csv(result: BenchResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("series", "value", "rep", "seconds"))
    for s, v, rep, x in result.samples:
        w.writerow([s, v, rep, _f(x)])
    return buf.getvalue()


def summary_text(result: BenchResult) -> str:
    if not result.rows:
        raise EmptyTable("nothing to report: the stats table is empty")
    lines = [f"variable: {result.variable}",
             f"x axis: {result.x_label}",
             f"y axis: {result.y_label}",
             f"interval: {result.ci_method}",
             f"repetitions: {result.extras.get('repetitions')}",
             f"infrastructure failures: {result.failures}"]
    if result.aborted:
        lines.append(f"ABORTED: {result.aborted}")
    lines.append("")
    width = max(len(r.series) for r in result.rows)
    vwidth = max(len(r.value) for r in result.rows)
    lines.append(f"{'series':<{width}}  {'value':>{vwidth}}  {'mean':>10}  {'95% CI':>23}  n")
    for r in result.rows:
        lines.append(f"{r.series:<{width}}  {r.value:>{vwidth}}  {r.mean:10.4f}  "
                     f"[{r.ci_low:10.4f}, {r.ci_high:10.4f}]  {r.n}")
    extras = {k: v for k, v in result.extras.items() if k not in ("repetitions", "pairs")}
    if extras:
        lines.append("")
        for k in sorted(extras):
            lines.append(f"{k}: {json.dumps(extras[k], sort_keys=True)}")
    return "\n".join(lines) + "\n"


def figure(result: BenchResult, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    series = list(dict.fromkeys(r.series for r in result.rows))
    categorical = result.variable == "handler_complexity"
    labels = list(dict.fromkeys(r.value for r in result.rows))
    for name in series:
        rows = result.series(name)
        xs = [labels.index(r.value) if categorical else float(r.value) for r in rows]
        ys = [r.mean for r in rows]
        err = [[r.mean - r.ci_low for r in rows], [r.ci_high - r.mean for r in rows]]
        ax.errorbar(xs, ys, yerr=err, marker="o", capsize=4, label=name,
                    linestyle="none" if categorical else "-")
    if categorical:
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels)
    ax.set_xlabel(result.x_label)
    ax.set_ylabel(result.y_label)
    ax.set_title(f"{result.variable} (mean, 95% CI)")
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def render(result: BenchResult, out_dir) -> dict:
    """Write every output file; returns name -> path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = results_csv(result)
    paths = {name: out / name for name in (RESULTS_CSV, SAMPLES_CSV, SUMMARY_TXT, FIGURE_PNG)}
    paths[RESULTS_CSV].write_text(table)
    paths[SAMPLES_CSV].write_text(samples_csv(result))
    paths[SUMMARY_TXT].write_text(summary_text(result))
    figure(result, paths[FIGURE_PNG])
    return paths

"""Render experiment CSVs into log-log figures with fitted-slope annotations.

The input schema is the experiment harness CSV: a '# config: {...}' comment,
a fixed header row, and one data row per mesh size.  This tool talks to the
solver package only through that file format.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, field

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


CONVERGENCE = "CONVERGENCE"
CONDITION = "CONDITION"
HOMOG_RATES = "HOMOG_RATES"

# columns each figure kind needs on top of the shared abscissa
_REQUIRED = {
    CONVERGENCE: ["h", "err_l2", "err_h1"],
    CONDITION: ["h", "cond2"],
    HOMOG_RATES: ["eps", "err_l2", "err_h1", "err_l2_homog", "err_h1_homog"],
}

_SERIES = {
    CONVERGENCE: [("err_l2", "L2 error"), ("err_h1", "H1 error")],
    CONDITION: [("cond2", "condition number")],
    HOMOG_RATES: [("err_h1", "first-order H1 error"),
                  ("err_h1_homog", "zeroth-order H1 error")],
}

_XCOL = {CONVERGENCE: "h", CONDITION: "h", HOMOG_RATES: "eps"}


class SchemaError(Exception):
    pass


@dataclass
class PlotJob:
    csv_path: str
    kind: str
    out_path: str
    title: str = ""
    columns: list = field(default_factory=list)  # override default series

    def __post_init__(self):
        if self.kind not in _REQUIRED:
            raise SchemaError(f"unknown figure kind {self.kind!r}")


def read_csv(path: str) -> tuple[list[str], list[dict]]:
    """(header, rows); numeric strings parsed, blanks become None."""
    rows = []
    header = None
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if header is None:
                header = parts
                continue
            row = {}
            for k, v in zip(header, parts):
                if v == "":
                    row[k] = None
                else:
                    try:
                        row[k] = float(v)
                    except ValueError:
                        row[k] = v
            rows.append(row)
    if header is None:
        raise SchemaError(f"{path}: no header row found")
    return header, rows


def validate(job: PlotJob, header: list[str], rows: list[dict]) -> None:
    needed = [_XCOL[job.kind]] + [c for c, _ in _series_for(job)]
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError(
            f"{job.csv_path}: missing required columns {missing}; "
            f"found columns {header}")
    if len(rows) < 2:
        raise SchemaError(f"{job.csv_path}: need at least 2 data rows")


def fit_slope(x: np.ndarray, y: np.ndarray) -> float:
    if np.any(x <= 0) or np.any(y <= 0):
        raise SchemaError("log-log slope needs positive data")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _series_for(job: PlotJob):
    if job.columns:
        return [(c, c) for c in job.columns]
    return _SERIES[job.kind]


def render(job: PlotJob) -> dict:
    """Write the figure and return the annotation metadata.

    The returned dict maps series column -> formatted slope string exactly
    as drawn, so callers can assert the text without decoding pixels.
    """
    header, rows = read_csv(job.csv_path)
    validate(job, header, rows)
    xcol = _XCOL[job.kind]
    annotations = {}
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    markers = "os^dv"
    xall = []
    for i, (col, label) in enumerate(_series_for(job)):
        pts = [(r[xcol], r[col]) for r in rows
               if r.get(xcol) is not None and r.get(col) is not None]
        if len(pts) < 2:
            raise SchemaError(f"{job.csv_path}: column {col} has fewer than "
                              f"2 usable values")
        x = np.array([p[0] for p in pts])
        y = np.array([p[1] for p in pts])
        slope = fit_slope(x, y)
        text = f"{slope:.2f}"
        annotations[col] = text
        ax.loglog(x, y, marker=markers[i % len(markers)],
                  label=f"{label} (slope {text})")
        xall.append(x)
    xall = np.concatenate(xall)
    _reference_guides(ax, job.kind, xall, rows, xcol)
    ax.set_xlabel(xcol)
    ax.set_ylabel("condition number" if job.kind == CONDITION else "error")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    if job.title:
        ax.set_title(job.title)
    fig.tight_layout()
    fig.savefig(job.out_path, dpi=150)
    plt.close(fig)
    return annotations


def _reference_guides(ax, kind, xall, rows, xcol):
    """Dashed reference lines: slopes 1 and 2 (errors) or -2 (condition)."""
    x0, x1 = xall.min(), xall.max()
    xs = np.array([x0, x1])
    ymin, ymax = ax.get_ylim()
    anchor = np.sqrt(ymin * ymax)
    guides = (-2.0,) if kind == CONDITION else \
        (1.0, 0.5) if kind == HOMOG_RATES else (1.0, 2.0)
    for s in guides:
        ax.loglog(xs, anchor * (xs / x1) ** s, "k--", linewidth=0.8, alpha=0.6)
        ax.annotate(f"slope {s:g}", (xs[0], anchor * (xs[0] / x1) ** s),
                    fontsize=8, alpha=0.7)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot", description="render experiment CSVs as log-log figures")
    parser.add_argument("--kind", required=True,
                        choices=("convergence", "condition", "homog-rates"))
    parser.add_argument("--in", dest="csv_path", required=True)
    parser.add_argument("--out", dest="out_path", required=True)
    parser.add_argument("--title", default="")
    parser.add_argument("--columns", nargs="*", default=None,
                        help="override which error columns to draw")
    args = parser.parse_args(argv)
    kind = {"convergence": CONVERGENCE, "condition": CONDITION,
            "homog-rates": HOMOG_RATES}[args.kind]
    job = PlotJob(args.csv_path, kind, args.out_path, title=args.title,
                  columns=args.columns or [])
    try:
        annotations = render(job)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for col, slope in annotations.items():
        print(f"{col}: slope {slope}")
    print(f"wrote {args.out_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

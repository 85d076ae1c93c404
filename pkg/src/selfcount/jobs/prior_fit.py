"""Maximum-likelihood prior fitting job.

Reads a counts CSV (one count per line, no header), fits one or all
parametric families and writes a report with columns
``family,param1,param2,loglik``. The fitted and empirical log-log curves go
to a second file next to the report (``<report>_loglog.csv``).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import pandas as pd

from selfcount.data.loader import read_counts_csv
from selfcount.domain.prior import FAMILIES, FitError, FitReport, empirical_loglog, fit_all, fit_mle

REPORT_COLUMNS = ["family", "param1", "param2", "loglik"]
LOGLOG_COLUMNS = ["curve", "log_count", "log_probability"]


def loglog_path(report_path: str | Path) -> Path:
    path = Path(report_path)
    return path.with_name(f"{path.stem}_loglog.csv")


def report_frame(reports: Sequence[FitReport]) -> pd.DataFrame:
    rows = []
    for report in reports:
        values = list(report.params.values()) + [float("nan")] * 2
        rows.append(
            {
                "family": report.family,
                "param1": values[0],
                "param2": values[1],
                "loglik": report.log_likelihood,
            }
        )
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def loglog_frame(reports: Sequence[FitReport], counts: Sequence[float], xmin: float) -> pd.DataFrame:
    curves: List[Tuple[str, List[Tuple[float, float]]]] = [
        ("empirical", empirical_loglog(counts, xmin=xmin))
    ]
    curves.extend((report.family, report.loglog_curve) for report in reports)
    rows = [
        {"curve": name, "log_count": x, "log_probability": y}
        for name, points in curves
        for x, y in points
    ]
    return pd.DataFrame(rows, columns=LOGLOG_COLUMNS)


def run(input_path: str, family: str, out_path: str, xmin: float = 1.0) -> pd.DataFrame:
    print("Starting prior fit job...")
    print(f"Input: {input_path}")
    print(f"Family: {family}, xmin: {xmin}")

    counts = read_counts_csv(input_path)
    print(f"Loaded {len(counts):,} counts")
    if family == "all":
        reports = fit_all(counts, xmin=xmin)
    else:
        reports = [fit_mle(counts, family, xmin=xmin)]

    report = report_frame(reports)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out, index=False)
    curve_path = loglog_path(out)
    loglog_frame(reports, counts, xmin).to_csv(curve_path, index=False)

    print("=" * 60)
    print("Prior fit complete.")
    for row in report.itertuples():
        print(f"  {row.family:<20} loglik={row.loglik:.3f} ({row.param1:.4g}, {row.param2:.4g})")
    print(f"  Report:  {out}")
    print(f"  Log-log: {curve_path}")
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Fit parametric priors to cell counts")
    parser.add_argument("--input", required=True, help="Counts CSV, one count per line")
    parser.add_argument("--family", default="all", choices=("all", *FAMILIES))
    parser.add_argument("--out", required=True, help="Report CSV path")
    parser.add_argument("--xmin", type=float, default=1.0, help="Lower cutoff of the fit")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> None:
    args = build_parser().parse_args(argv)
    try:
        run(args.input, args.family, args.out, xmin=args.xmin)
    except (FitError, ValueError, OSError) as e:
        print(f"Prior fit failed: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()

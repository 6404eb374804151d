#!/usr/bin/env python3
"""Attention cost of ASF vs SCF: instrumented counts, closed forms and wall time.

    python scripts/bench_complexity.py --out runs/bench.csv
"""

from __future__ import annotations

import argparse
from pathlib import Path

from asfusion.baselines import BenchPoint, bench, default_grid, write_bench_csv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/bench.csv")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    points = default_grid() + [BenchPoint(N_p=144, N_obj=300, n_td=6)]
    rows = bench(points, repeats=args.repeats)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(out, rows)

    print(f"{'method':>6} {'n_p':>4} {'N_p':>5} {'N_q':>4} {'N_obj':>6} {'n_td':>5} {'evals':>10} {'closed':>10} {'ms':>9}")
    for r in rows:
        flag = "" if r["score_evals"] == r["closed_form_score_evals"] else "  MISMATCH"
        print(f"{r['method']:>6} {r['n_p']:>4} {r['N_p']:>5} {r['N_q']:>4} {r['N_obj']:>6} {r['n_td']:>5} "
              f"{r['score_evals']:>10} {r['closed_form_score_evals']:>10} {r['wall_time_ns'] / 1e6:9.2f}{flag}")
    asf, scf = rows[-2], rows[-1]
    print(f"\nat N_p=144, N_obj=300, n_td=6: SCF/ASF score evals {scf['score_evals'] / asf['score_evals']:.0f}x, "
          f"wall time {scf['wall_time_ns'] / asf['wall_time_ns']:.1f}x")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()

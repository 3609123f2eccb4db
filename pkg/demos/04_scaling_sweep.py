"""
Time and memory against sequence length
=======================================

Forward passes of the nano encoder and a depth/width-matched attention
encoder over growing token counts.  Writes ``bench.csv`` and
``bench_summary.csv`` and prints the fitted log-log slopes.

    python3 demos/04_scaling_sweep.py --out bench_out
    python3 demos/04_scaling_sweep.py --quick
"""

import argparse

from ssamba import bench

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="bench_out")
parser.add_argument("--quick", action="store_true", help="short lengths, one trial")
args = parser.parse_args()

if args.quick:
    cfg = bench.BenchConfig(lengths=(64, 128, 256, 512), batch=2, trials=1, warmups=1)
else:
    cfg = bench.BenchConfig()


def show(p):
    t = "truncated" if p.truncated else f"{p.median_seconds:8.4f}s"
    print(f"{p.kind:9s} M={p.M:5d}  {t}  analytic {p.analytic_bytes / 2**20:8.1f} MiB  "
          f"peak {p.peak_bytes / 2**20:8.1f} MiB")


result = bench.sweep(cfg, args.out, progress=show)

print()
for (kind, metric), fit in result.fits.items():
    print(f"{kind:9s} {metric:15s} slope {fit.slope:.3f}  r2 {fit.r2:.4f}")

print()
for name, ok, detail in bench.scaling_checks(result):
    print(f"{'ok ' if ok else 'NO '} {name}: {detail}")

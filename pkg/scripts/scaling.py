"""Amortized per-batch cost against the number of centers for EP4, EP3 mode and a dense solve."""
import argparse
import json
from pathlib import Path

from eigenpro4.bench import BenchConfig, bench_summary, run_sweep, write_csv, write_trace
from eigenpro4.data import synth_blobs
from eigenpro4.kernels import KernelSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--p", default="64,128,256,512,1024")
    ap.add_argument("--m", type=int, default=8)
    ap.add_argument("--n", type=int, default=2500)
    ap.add_argument("--epochs", type=int, default=1)
    ap.add_argument("--parallel", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("results/scaling"))
    args = ap.parse_args()

    tr, te = synth_blobs(args.n, 10, 5, seed=0).split(0.2, seed=0)
    cfg = BenchConfig(ps=[int(v) for v in args.p.split(",")], batch_size=args.m,
                      epochs=args.epochs)
    rows = run_sweep(tr, te, KernelSpec(), cfg, parallel=args.parallel)
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(rows, args.out / "bench.csv")
    write_trace(rows, args.out / "trace.csv")
    summary = bench_summary(rows, cfg)
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"{'method':>6} {'p':>5} {'flops/batch':>12} {'wall_ms':>9} {'test_acc':>8}")
    for r in rows:
        print(f"{r.method:>6} {r.p:>5} {r.amortized_flops:12.0f} {r.wall_ms:9.1f} {r.test_acc:8.4f}")
    for method, slope in summary["slopes"].items():
        print(f"log-log slope {method}: {slope:.3f}")


if __name__ == "__main__":
    main()

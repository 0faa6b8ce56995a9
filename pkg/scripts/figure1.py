"""Run the three-teacher adversarial training comparison and write plot data.

    python scripts/figure1.py --out runs/figure1 --threads 4
"""

import argparse
import time
from pathlib import Path

from robustfl.experiment import ExperimentSpec, emit_plot_data, read_results, run_experiment

ORDER = ("KnownUFixed", "SDthenADsecond", "SDthenADall", "FullAD")


def final_risks(results_csv, iters):
    out = {}
    for r in read_results(results_csv):
        if int(r["iter"]) == iters:
            out[(r["method"], int(r["seed"]))] = float(r["robust_test_risk"])
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/figure1")
    ap.add_argument("--threads", type=int, default=4)
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--probe-every", type=int, default=100)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--teachers", nargs="+", default=["ReLU", "Tanh", "He2"])
    args = ap.parse_args(argv)

    for teacher in args.teachers:
        t0 = time.perf_counter()
        spec = ExperimentSpec.figure1(teacher, iters=args.iters, probe_every=args.probe_every,
                                      seeds=args.seeds, experiment_id=f"figure1-{teacher}")
        out = Path(args.out) / teacher
        paths = run_experiment(spec, out, threads=args.threads)
        emit_plot_data(paths["results"], out / "plot.csv")
        risks = final_risks(paths["results"], args.iters)
        print(f"{teacher}  ({time.perf_counter() - t0:.0f}s)")
        for s in args.seeds:
            row = "  ".join(f"{m}={risks[(m, s)]:.4f}" for m in ORDER)
            print(f"  seed {s}: {row}")


if __name__ == "__main__":
    main()

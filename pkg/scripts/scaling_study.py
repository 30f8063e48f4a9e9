"""Wall-clock scaling of the dense and MPTN temporal stages, plus the FLOP table.

    python3 scripts/scaling_study.py --T 8,16,32,64,128 --repetitions 10 --csv scaling.csv
"""

import argparse

from vqt.bench import CONVENTION, flops_ratio, jl_error_bound, scaling_study, write_csv
from vqt.mptn import plan_pathways


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", default="8,16,32,64,128")
    ap.add_argument("--repetitions", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    Ts = [int(t) for t in args.T.split(",")]

    print(f"# {CONVENTION}")
    for T in (8, 16, 32, 64, 96, 128, 256):
        plan = plan_pathways(T)
        r = flops_ratio(T, 16, 32, plan)
        print(f"T={T:4d}  budgets={list(plan.budgets)}  mptn/dense={r} ({float(r):.4f})")
    print(f"jl_error_bound(96, 768) = {jl_error_bound(96, 768):.4f}")
    result = scaling_study(Ts, repetitions=args.repetitions, seed=args.seed)
    print(result.to_text(), end="")
    if args.csv:
        write_csv(args.csv, result.reports)


if __name__ == "__main__":
    main()

"""Held-out distance to the pseudoinverse solution per epoch, exact vs inexact projection."""
import argparse

import numpy as np

from eigenpro4.checks import min_norm_instance
from eigenpro4.kernels import kernel_matrix
from eigenpro4.oracle import min_norm_solution
from eigenpro4.solver import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, nargs="+", default=[1, 2, 5, 10, 20, 50])
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    tr, te, Z, spec = min_norm_instance(args.seed)
    K_te = kernel_matrix(spec, te.X, Z)
    ref = K_te @ min_norm_solution(tr.X, tr.Y(), Z, spec)
    print(f"{'epochs':>6} {'exact':>9} {'inexact':>9}")
    for epochs in args.epochs:
        errs = []
        for proj in ("exact", "inexact"):
            rep = train(tr.X, tr.Y(), Z, TrainConfig(batch_size=50, epochs=epochs, seed=0,
                                                     projection=proj), spec)
            errs.append(np.linalg.norm(K_te @ rep.model.alpha - ref) / np.linalg.norm(ref))
        print(f"{epochs:6d} {errs[0]:9.4f} {errs[1]:9.4f}")


if __name__ == "__main__":
    main()

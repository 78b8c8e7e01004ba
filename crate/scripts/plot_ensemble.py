#!/usr/bin/env python3
"""Monte Carlo sample paths and relative errors from a `simulate` run.

usage: plot_ensemble.py OUT_DIR [--save FILE]
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--save", type=Path, default=None)
    args = ap.parse_args()

    paths = pd.read_csv(args.out_dir / "paths_sample.csv", comment="#")
    belief = pd.read_csv(args.out_dir / "belief_trajectory.csv", comment="#")
    errs = pd.read_csv(args.out_dir / "relative_errors.csv", comment="#")

    fig, ax = plt.subplots(1, 2, figsize=(11, 4.5))
    for _, path in paths.groupby("path"):
        ax[0].plot(path["y"], path["z"], color="0.7", lw=0.6)
    ax[0].plot(belief["y"], belief["z"], "k-", lw=2, label="statlin mean")
    ax[0].set_xlabel("y [m]")
    ax[0].set_ylabel("z [m]")
    ax[0].legend()

    ax[1].semilogy(errs["t"], errs["mean_rel_err"], label="mean")
    ax[1].semilogy(errs["t"], errs["cov_rel_err"], label="covariance")
    ax[1].set_xlabel("t [s]")
    ax[1].set_ylabel("relative error vs Monte Carlo")
    ax[1].legend()

    fig.tight_layout()
    fig.savefig(args.save or args.out_dir / "ensemble.png", dpi=120)


if __name__ == "__main__":
    main()

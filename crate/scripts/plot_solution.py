#!/usr/bin/env python3
"""Trajectory, thrust profile and position dispersion from a `solve` run.

usage: plot_solution.py OUT_DIR [--save FILE]
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd


def load(path):
    return pd.read_csv(path, comment="#")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--save", type=Path, default=None)
    args = ap.parse_args()

    belief = load(args.out_dir / "belief_trajectory.csv")
    ctrl = load(args.out_dir / "control.csv")

    fig, ax = plt.subplots(1, 3, figsize=(15, 4.5))
    ax[0].plot(belief["y"], belief["z"], "k-")
    for _, row in belief.iloc[:: max(1, len(belief) // 15)].iterrows():
        cov = np.array([[row["p00"], row["p01"]], [row["p01"], row["p11"]]])
        vals, vecs = np.linalg.eigh(cov)
        angle = np.degrees(np.arctan2(vecs[1, 1], vecs[0, 1]))
        w, h = 2 * 3 * np.sqrt(np.maximum(vals[::-1], 0))
        ax[0].add_patch(matplotlib.patches.Ellipse((row["y"], row["z"]), w, h, angle=angle, fill=False, color="tab:blue"))
    ax[0].set_xlabel("y [m]")
    ax[0].set_ylabel("z [m]")
    ax[0].set_title("mean trajectory, 3-sigma position ellipses")

    ax[1].step(ctrl["t_start"], ctrl["norm"], where="post")
    ax[1].set_xlabel("t [s]")
    ax[1].set_ylabel("thrust ratio along the mean")
    ax[1].set_title("control norm")

    ax[2].plot(belief["t"], np.sqrt(belief["p00"]), label="std y")
    ax[2].plot(belief["t"], np.sqrt(belief["p11"]), label="std z")
    ax[2].set_xlabel("t [s]")
    ax[2].set_ylabel("[m]")
    ax[2].legend()
    ax[2].set_title("position dispersion")

    fig.tight_layout()
    fig.savefig(args.save or args.out_dir / "solution.png", dpi=120)


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Log-log plot of the time-rescaling probe (`probe.csv`).

usage: plot_probe.py OUT_DIR [--save FILE]
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

    probe = pd.read_csv(args.out_dir / "probe.csv", comment="#")
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(probe["eta"], probe["constraint_value"], "o-")
    ax.set_xlabel("eta")
    ax.set_ylabel("constraint value")
    fig.tight_layout()
    fig.savefig(args.save or args.out_dir / "probe.png", dpi=120)


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Estimation-error ensemble at the production parameter set.

Reproduces the error-vs-time comparison: empirical QKF and line-fit MSE
at log-spaced checkpoints against the numerical covariance curve, the
closed-form (no-prior) threshold, its late-time asymptote, and the
projection-noise reference.  ~2 minutes at n_traj = 10^4.
"""
import sys

from qkfmag.cli import main

if __name__ == "__main__":
    sys.exit(main(["ensemble", "--preset", "fig2", "--workers", "4",
                   "--out", "out/fig2"] + sys.argv[1:]))

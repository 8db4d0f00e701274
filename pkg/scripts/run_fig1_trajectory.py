#!/usr/bin/env python3
"""Single-shot magnetometry record at zero field.

Writes the raw trajectory and the low-pass filtered photocurrent
(cutoff sqrt(J)/t_total Hz) to out/fig1/.
"""
import sys

from qkfmag.cli import main

if __name__ == "__main__":
    sys.exit(main(["simulate", "--preset", "fig1", "--out", "out/fig1"]))

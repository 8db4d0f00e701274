#!/usr/bin/env python3
"""RMS error vs collective spin J at fixed readout time (1/J scaling check)."""
import sys

from qkfmag.cli import main

if __name__ == "__main__":
    sys.exit(main(["scaling", "--preset", "scaling", "--workers", "4",
                   "--out", "out/scaling"] + sys.argv[1:]))

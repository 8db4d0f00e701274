#!/usr/bin/env python3
"""Dense small-J master-equation validation of the Gaussian model."""
import sys

from qkfmag.cli import main

if __name__ == "__main__":
    sys.exit(main(["oracle-check", "--preset", "oracle", "--out", "out/oracle"]))

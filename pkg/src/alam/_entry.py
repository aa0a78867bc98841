"""Console entry point; pins BLAS to one thread before numpy is imported."""

import os


def main() -> int:
    # single-threaded BLAS keeps runs bit-reproducible
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")
    from alam.cli import main as cli_main

    return cli_main()

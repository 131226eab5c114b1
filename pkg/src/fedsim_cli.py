"""Console entry point; pins BLAS threading before numpy loads so CSV outputs
are byte-identical regardless of the host's core count."""

import os
import sys


def main() -> int:
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    os.environ.setdefault("MKL_NUM_THREADS", "1")
    from fedsim.harness.cli import main as cli_main

    return cli_main()


if __name__ == "__main__":
    sys.exit(main())

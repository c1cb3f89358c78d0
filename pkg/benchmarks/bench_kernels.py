"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [n ...]
"""

import sys

from proxmed.benchmark import format_rows, run_benchmark

if __name__ == "__main__":
    sizes = tuple(int(a) for a in sys.argv[1:]) or (1000, 10000, 100000)
    print(format_rows(run_benchmark(sizes)))

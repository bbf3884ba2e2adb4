"""Pin BLAS to one thread before numpy ever loads.

Reductions inside BLAS matmuls are only bit-reproducible at a fixed thread
count, and the runtime budgets in the acceptance tests are stated
single-threaded.  This must run before any test module imports numpy, which
pytest's conftest-first import order guarantees.
"""

import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(var, "1")

# subprocesses spawned by CLI tests inherit the same pinning via this env
CLI_ENV = dict(os.environ)

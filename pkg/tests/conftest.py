import os

# pin BLAS to one thread before numpy loads: honest single-core timings and
# run-to-run determinism for the reproducibility checks
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

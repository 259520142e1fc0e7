import os

# Pin the BLAS thread count before numpy loads: the determinism tests
# compare bit-exact results across runs within one process.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

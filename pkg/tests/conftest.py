import os

# single-threaded BLAS: faster for this model's small matrices, and keeps
# results identical across machines with different core counts
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

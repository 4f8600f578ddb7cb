import os

"""
Approach:

-> One place for the numbers every module agrees on (friction, tolerances,
   sweep density, step-size limits of the local-error bounds).
-> Parallelism is capped through the LANGEVIN_THREADS environment variable,
   read each time it is needed so tests can change it.

Example:

    LANGEVIN_THREADS=4 langevin-certify table1 --kappa 1e9
    -> thread_count() == 4, so table cells are evaluated by at most 4 workers
    LANGEVIN_THREADS=zero -> ignored, falls back to os.cpu_count()
"""

# Dynamics
DEFAULT_GAMMA = 2.0          # friction, the normalization used by all eigencurve formulas

# Algebra
RELATION_TOLERANCE = 1e-12   # invariance-relation residuals
SKEW_TOLERANCE = 1e-12       # R^T = -R check in build_from_skew
PSD_TOLERANCE = 1e-12        # eigenvalue slack for psd checks

# H sweeps
SWEEP_GRID = 2048            # grid points over [m, L] (half linear, half geometric)
GOLDEN_XTOL = 1e-12          # relative bracket tolerance for golden-section polish
GOLDEN_ROUNDS = 3            # zoom rounds around the grid extremum

# Kernels
SERIES_THRESHOLD = 1e-4      # gamma*t below which E/F/G use truncated series

# Lyapunov doubling
LYAPUNOV_MAX_DOUBLINGS = 64
LYAPUNOV_RESIDUAL = 1e-12

# Bounds and plans
DEFAULT_RBAR = 0.45          # rate r = rbar/kappa for c = 1/L
DEFAULT_SPLIT = 0.5          # fraction of eps spent on the bias term
LOCAL_ERROR_STEP_LIMIT = {"EE": 1.0, "UBU": 2.0}

# Ensembles
ASSIGNMENT_CAP = 2048        # exact assignment solver size limit
NOISE_CHUNK = 256            # steps of noise drawn per chain at once
PROBE_TOLERANCE = 1e-8


def thread_count() -> int:
    raw = os.environ.get("LANGEVIN_THREADS", "").strip()
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value >= 1:
        return value
    return os.cpu_count() or 1

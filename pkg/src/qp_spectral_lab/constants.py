"""
Constants used throughout the qp-spectral-lab project.
"""

SCHEMA_VERSION = "qp-lab/1"

# Fixed salt keeps SVG element ids stable between runs
SVG_HASH_SALT = "qp-spectral-lab"


class ExitCodes:
    """Process exit statuses of the command-line harness."""

    OK = 0
    VALIDATION = 2
    NUMERICAL = 3


class ArtifactNames:
    """File names written into the output directory."""

    RESULTS = "results.json"
    RUN_REPORT = "run_report.json"
    ERROR = "error.json"
    CALIBRATION_LOCK = "calibration.lock.json"
    OPERATOR_CSV = "operator.csv"
    GREEN_CSV = "green.csv"
    LDT_CSV = "ldt_scan_N{scale}.csv"
    LDT_HEATMAP = "ldt_heatmap_N{scale}.svg"
    LOCALIZATION_CSV = "localization.csv"
    DECAY_PLOT = "decay_profiles.svg"
    BRANCH_CSV = "branches.csv"
    BRANCH_PLOT = "branches.svg"
    BENCH_CSV = "bench.csv"
    SWEEP_CSV = "sweep.csv"
    POISSON_CSV = "poisson.csv"


class ErrorKinds:
    """Machine-readable error identifiers carried in error payloads."""

    VALIDATION = "VALIDATION"
    DIMENSION_MISMATCH = "DIMENSION_MISMATCH"
    INFEASIBLE_PAVING = "INFEASIBLE_PAVING"
    REGION_TOO_LARGE = "REGION_TOO_LARGE"
    NOT_DUALIZABLE = "NOT_DUALIZABLE"
    CORRUPT_COEFFICIENTS = "CORRUPT_COEFFICIENTS"
    SINGULAR = "SINGULAR"
    DIVERGED = "DIVERGED"
    UNCOVERED_POINT = "UNCOVERED_POINT"
    HYPOTHESIS_VIOLATED = "HYPOTHESIS_VIOLATED"
    NO_GOOD_ANNULUS = "NO_GOOD_ANNULUS"
    EIGEN_SOLVER = "EIGEN_SOLVER"
    SWEEP_FAILURES = "SWEEP_FAILURES"


# Region point lists are materialized only up to this many sites
MAX_MATERIALIZED_SITES = 1_000_000

# Floor applied before taking logarithms of Green's function entries
LOG_FLOOR = 1e-300

# Series summation stops once terms fall below this value
TAIL_TERM_CUTOFF = 1e-18

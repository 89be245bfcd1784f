"""
Configuration module for the NLW torus solver.
Contains numerical defaults, tolerances and output settings.
"""

# Logging
LOG_LEVEL = "INFO"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOGGER_NAME = "nlw_tori"

# Model defaults
DEFAULT_MASS = 1.0
DEFAULT_SPACE_CUTOFF = 8          # Fourier modes |n| <= N_space
DEFAULT_SOBOLEV_WEIGHT = 2.0      # s in the weighted norms
COLLOCATION_FACTOR = 4            # x-grid has COLLOCATION_FACTOR * N_space + 1 points
ANALYTICITY_RADIUS = 1.0e3        # max ||q||_s accepted by the nonlinearity gradient

# Normal form
AMPLITUDE_SCALE = 4.0             # internal field v = u / AMPLITUDE_SCALE
SYMPLECTIC_PROBE_RADIUS = 1.0e-2  # |z| at which the flow Jacobian is sampled
BIRKHOFF_DIVISOR_FLOOR = 1.0e-8       # |sum of signed mu| below this aborts the normal form
REMAINDER_SAMPLES = 64

# Truncation defaults
DEFAULT_FOURIER_CUTOFF = 6        # Q
DEFAULT_MODE_CUTOFF = 6           # Kmax
JET_DENSE_ENTRY_CAP = 50_000_000  # max complex entries in one dense jet kernel
CONVOLUTION_WINDOW_CAP = 4096

# RG iteration
DEFAULT_ETA = 0.5
DEFAULT_JET_ORDER = 2
MAX_JET_ORDER = 3
DEFAULT_MAX_LEVELS = 6
CONTRACTION_LIMIT = 0.5           # ||Gamma Dw|| at or above this aborts
SINGULAR_CONDITION = 1.0e12
PICARD_TOLERANCE = 1.0e-15
PICARD_MAX_ITERATIONS = 200
HERMITICITY_WARN = 1.0e-10
PROJECTOR_TOLERANCE = 1.0e-12
DIAGONAL_NEGLIGIBLE = 1.0e-12     # ||sigma|| below this is not worth a warning
LINEARITY_PROBE = 1.0e-2          # probe size relative to ||z_n|| for the linearity ratio
GAMMA_SYMBOL_SAMPLES = 2001       # kappa points per cluster window

# Tangential and coupled solves
TANGENTIAL_TOLERANCE = 1.0e-12
TANGENTIAL_MAX_ITERATIONS = 100
STALL_RATIO = 0.5                 # a step at least this fraction of the previous one is not contracting
STALL_TOLERANCE = 1.0e-8          # relative step below which a stalled iteration is accepted
COUPLED_TOLERANCE = 1.0e-10
COUPLED_MAX_ITERATIONS = 50
COUPLED_DAMPING = 1.0

# Diophantine sets
DEFAULT_DIOPH_CAP = 32            # |q|_inf enumeration cap
DEFAULT_MEASURE_SAMPLES = 10_000
DEFAULT_K_GRID = [0.0, 1.0e-4, 3.0e-4, 1.0e-3, 3.0e-3, 1.0e-2, 3.0e-2, 1.0e-1]
CONFIDENCE_LEVEL = 0.95
MEASURE_CHUNK = 1024               # samples per vectorised distance block

# Verification
FD_COARSE_RATIO = 0.1             # |FD4 - FD2| above this fraction of signal flags the grid
PDE_SLOPE_MIN = 2.8
LINDSTEDT_MAX_ORDER = 4
LINDSTEDT_DIVISOR_FLOOR = 1.0e-12  # |(omega.q)^2 - mu^2| below this is a vanishing denominator
LINDSTEDT_TAIL_FACTOR = 10.0      # allowed gap: this times the last retained term, plus the residual tolerance
RESIDUAL_TOLERANCE = 1.0e-8
STABILITY_THRESHOLD = 2.0         # dt * mu_max must stay below this
PDE_TIME_SAMPLES = 65
FREQUENCY_SHIFT_TOLERANCE = 0.1   # relative to the predicted shift
TRACKING_SAMPLES = 50

# CLI exit codes
EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_INADMISSIBLE = 2
EXIT_CONTRACTION = 3
EXIT_CONFIG = 64

# Output artefacts
SOLUTION_FILE = "solution.json"
LEVELS_FILE = "levels.json"
RESIDUALS_FILE = "residuals.csv"
MEASURE_FILE = "measure.csv"
VERIFY_FILE = "verify.json"
NORMAL_FORM_FILE = "normal_form.json"
DIVISORS_FILE = "divisors.csv"
RECORD_FILE = "run_record.json"
RUN_LOG_FILE = "run.log"
FLOAT_FORMAT = ".17g"

"""Training-free weight compression with calibration-whitened orthogonal dictionaries."""

from .allocator import AllocationPlan, AllocatorConfig, allocate, compute_spectra, guard_bounds
from .factorizer import FactorizerConfig, factorize, procrustes_update, solve_ks, sparse_code
from .gram import CholeskyFactor, GramState, accumulate, cholesky, dewhiten_dictionary, whiten
from .packing import FactorizedLayer, pack, storage_report, unpack

__version__ = "0.1.0"

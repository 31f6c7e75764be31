"""Surface reconstruction from fitted Gaussian charges."""

import warnings

__version__ = "0.1.0"

# numba probes for TBB on first parallel launch and warns when it is too old;
# the OpenMP/workqueue layers are used instead, so the warning is noise.
warnings.filterwarnings("ignore", message="The TBB threading layer")

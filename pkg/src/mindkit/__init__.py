"""mindkit: a desk-scale voxel-to-image reconstruction toolkit built on a small numpy autodiff."""

import os as _os

__version__ = "0.1.0"

# MINDKIT_THREADS caps BLAS threads; it only takes effect if numpy is not imported yet.
if _os.environ.get("MINDKIT_THREADS", "").isdigit():
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["MINDKIT_THREADS"])

"""Hot per-pixel kernels, with backend selection at import time.

The compiled Cython extension is preferred; the vectorized numpy twin is
used when the extension is unavailable or DVIO_PURE_PYTHON is set. Both
backends implement bilinear / tracking_terms / ssd_scores identically.
"""

import os

from . import _numpy

if os.environ.get("DVIO_PURE_PYTHON"):
    _backend = _numpy
else:
    try:
        from . import _ext as _backend
    except ImportError:
        _backend = _numpy

BACKEND = _backend.NAME
bilinear = _backend.bilinear
tracking_terms = _backend.tracking_terms
ssd_scores = _backend.ssd_scores

numpy_backend = _numpy

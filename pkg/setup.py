"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a vectorized numpy fallback is
selected at import time), so a failed compile is downgraded to a warning.
"""

import warnings

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/dvio/kernels/_ext.pyx",
        compiler_directives={"language_level": 3, "boundscheck": False, "wraparound": False},
    )
    include_dirs = [numpy.get_include()]
    for ext in ext_modules:
        ext.include_dirs = include_dirs
except Exception as exc:  # pragma: no cover
    warnings.warn(f"Cython extension disabled, using numpy fallback: {exc}")
    ext_modules = []

setup(ext_modules=ext_modules)

"""Build script for the optional compiled kernel core.

The package works without the extension (a numpy fallback is selected at
import time); set SSVD_SKIP_CYTHON=1 to skip compilation entirely.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("SSVD_SKIP_CYTHON"):
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext = Extension(
            "ssvd.kernels._fast",
            ["src/ssvd/kernels/_fast.pyx"],
            include_dirs=[np.get_include()],
            # -ffp-contract=off keeps mul+add as two rounded float32 ops so the
            # compiled kernels stay bit-identical to the numpy fallback.
            extra_compile_args=["-O3", "-ffp-contract=off"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
        ext_modules = cythonize([ext], language_level=3)
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)

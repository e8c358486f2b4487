"""Builds the optional compiled MLPG kernels.

If Cython or a compiler is unavailable the package still installs and
falls back to ``a2a._kernels_py`` at import time.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("A2A_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("a2a._kernels", ["src/a2a/_kernels.pyx"],
                       include_dirs=[np.get_include()],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                       extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)

import os
import warnings

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None


def extensions():
    if cythonize is None or os.environ.get("HOROM_NO_EXT"):
        warnings.warn("building without the compiled RK4 kernel; the NumPy fallback will be used")
        return []
    ext = Extension(
        "horom._rk4_ext",
        ["src/horom/_rk4_ext.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": 3})


setup(ext_modules=extensions())

"""Build script for the optional compiled kernel core.

The package is pure Python plus one Cython extension holding the hot
kernels (LCS, fused softmax cross-entropy, embedding scatter-add, AdamW).
The extension is marked optional: if it fails to build, the install still
succeeds and the numpy fallback backend is selected at import time.
"""

import numpy as np
from setuptools import Extension, setup
from Cython.Build import cythonize

extensions = [
    Extension(
        "unlearn_lab._kernels._core",
        ["src/unlearn_lab/_kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
)

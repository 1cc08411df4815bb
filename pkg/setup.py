import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python fallback still works
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("BESPOKEMLP_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "bespokemlp._kernels",
                ["src/bespokemlp/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
    )

setup(ext_modules=ext_modules)

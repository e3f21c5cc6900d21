import os

import numpy as np
from setuptools import Extension, setup

# Set RLLOGO_NO_EXT=1 to install without the compiled kernels.
ext_modules = []
if not os.environ.get("RLLOGO_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "rllogo._ckernels",
                    ["src/rllogo/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction: results must match the numpy fallback bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)

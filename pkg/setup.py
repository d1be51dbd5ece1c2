import numpy as np
from setuptools import Extension, setup

# The compiled kernels are optional: without Cython (or a compiler) the
# package falls back to the pure-numpy implementations at import time.
try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "basot.kernels._ckernels",
                ["src/basot/kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)

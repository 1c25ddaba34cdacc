"""Build the optional compiled kernels; the package falls back to numpy without them."""
import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # sdist without Cython: pure-Python install
    cythonize = None

# scalar-vs-SWAR comparisons model a core without vector units
compile_args = ["-O3", "-fno-tree-vectorize"]
link_args = []
if os.environ.get("WRAPNET_OPENMP", "1") != "0":
    compile_args.append("-fopenmp")
    link_args.append("-fopenmp")

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "wrapnet.kernels._ckernels",
                ["src/wrapnet/kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=compile_args,
                extra_link_args=link_args,
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)

import os

import numpy
from setuptools import Extension, setup

# The compiled kernels are optional: the package falls back to numpy when the
# extension is missing, so a failed build must not fail the install.
ext_modules = []
if not os.environ.get("PFEDDSH_NO_EXT"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "pfeddsh._ckernels",
                    sources=["src/pfeddsh/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": 3},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)

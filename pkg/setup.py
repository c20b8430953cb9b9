import os

import numpy as np
from setuptools import Extension, setup

# NEUMAT_NO_EXT=1 skips the compiled core; the package then runs on the numpy fallback.
ext_modules = []
if not os.environ.get("NEUMAT_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "neumat._kernels",
                ["src/neumat/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # bit-identical results against the numpy fallback need IEEE ops, no FMA contraction
                extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)

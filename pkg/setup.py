import os

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # build the pure-Python package only
    ext_modules = []
else:
    openmp = [] if os.environ.get("LSNET_NO_OPENMP") else ["-fopenmp"]
    ext_modules = cythonize(
        [
            Extension(
                "lsnet._ckernels",
                ["src/lsnet/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"] + openmp,
                extra_link_args=openmp,
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)

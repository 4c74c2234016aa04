import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; ranking falls back to numpy
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("UMTS_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "umts.evaluation._rank_cy",
                ["src/umts/evaluation/_rank_cy.pyx"],
                include_dirs=[np.get_include()],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)

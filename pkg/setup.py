import os
import sys

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; the numpy fallback is used at runtime
    cythonize = None


def _openmp_flags():
    if os.environ.get("DNRF_NO_OPENMP") or sys.platform == "darwin":
        return [], []
    return ["-fopenmp"], ["-fopenmp"]


ext_modules = []
if cythonize is not None:
    compile_args, link_args = _openmp_flags()
    ext = Extension(
        "dnrf._core",
        ["src/dnrf/_core.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-ffp-contract=off"] + compile_args,
        extra_link_args=link_args,
    )
    ext_modules = cythonize([ext], language_level="3")

setup(ext_modules=ext_modules)

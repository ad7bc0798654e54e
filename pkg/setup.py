"""Build script: compiles the optional Cython kernel for bulk PRNG stream
generation. If Cython or a C compiler is unavailable the package still
installs and falls back to the pure-Python kernel at import time."""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "skillmerge._kernels._xoshiro",
                ["src/skillmerge/_kernels/_xoshiro.pyx"],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)

"""Build the optional compiled kernels.

The package works without them: ``relsn._backend`` falls back to the numpy
implementation when ``relsn._kernels`` cannot be imported.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("RELSN_NO_EXTENSION"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "relsn._kernels",
                    ["src/relsn/_kernels.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": 3,
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=ext_modules)

"""Builds the optional compiled convolution kernels.

The package works without the extension (a numpy fallback is selected at
import time), so the extension is marked optional: a missing compiler
degrades the install instead of failing it.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "tgvseg.backend._convkernels",
                ["src/tgvseg/backend/_convkernels.pyx"],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)

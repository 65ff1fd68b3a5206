"""Builds the optional compiled kernels. Without Cython or a C compiler the
package still installs and runs on the numpy fallback."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("EGOGRPO_NO_EXT", "") not in ("1", "true", "yes"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("egogrpo.kernels._native", ["src/egogrpo/kernels/_native.pyx"],
                       include_dirs=[numpy.get_include()],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)

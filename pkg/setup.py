"""Build hook for the optional compiled kernel extension.

The package is fully functional without the extension (a NumPy fallback is
selected at import time), so any failure to build it is non-fatal. Set
MANGO_PURE_PYTHON=1 to skip the compilation step entirely.
"""

import os

from setuptools import setup


def _extensions():
    if os.environ.get("MANGO_PURE_PYTHON"):
        return []
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    ext = Extension(
        "mango._core",
        sources=["src/mango/_core.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        # no -ffast-math and no FMA contraction: the fallback/extension
        # bit-parity tests rely on strict IEEE semantics on both paths
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=_extensions())

"""Build script: compiles the optional convolution extension.

The package works without the extension (a numpy fallback is selected at
import time); the build therefore degrades gracefully when no compiler or
Cython is available.
"""

from setuptools import setup, Extension

extensions = []
try:
    import numpy
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "consistentid.kernels._convcore",
                ["src/consistentid/kernels/_convcore.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3", "-funroll-loops", "-march=native"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=extensions)

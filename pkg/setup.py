"""Builds the optional compiled kernels; the package works without them.

    pip install -e . --no-build-isolation
"""
from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:
    pass
else:
    ext_modules = cythonize(
        [
            Extension(
                "bcflsim._kernels",
                ["src/bcflsim/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
                language="c++",
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)

import numpy as np
from setuptools import Extension, setup

# The raycasting kernel is optional: the package falls back to the numpy
# renderer when the compiled module is unavailable. No -ffast-math and no
# -march flags so the compiled kernel stays bit-compatible with numpy.
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "viewpose.scenes._render_core",
                ["src/viewpose/scenes/_render_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)

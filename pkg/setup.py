"""Build script for the compiled kernel extension.

The extension is optional: if the toolchain is unavailable the package
installs anyway and the numpy kernel implementation is used at import time.
"""

import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            warnings.warn(f"compiled kernels skipped ({exc}); numpy fallback will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"compiled kernels skipped ({exc}); numpy fallback will be used")


def extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError as exc:
        warnings.warn(f"compiled kernels skipped ({exc}); numpy fallback will be used")
        return []
    ext = Extension(
        "gracile._kernels",
        ["src/gracile/_kernels.pyx"],
        include_dirs=[np.get_include()],
        # No -ffast-math: the kernels must keep strict IEEE754 inf/NaN behaviour.
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})

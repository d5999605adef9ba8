"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension: a numpy fallback is
selected at import time.  Any failure here (no Cython, no compiler) degrades
to a pure-Python install instead of aborting.  Set FEEDERSIM_PURE=1 to skip
the extension build entirely.
"""

import os

from setuptools import setup
from setuptools.command.build_ext import build_ext


class _OptionalBuildExt(build_ext):
    """build_ext that downgrades compiler failures to a warning."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"warning: skipping compiled kernels ({exc}); "
                  "the numpy fallback will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: could not build {ext.name} ({exc}); "
                  "the numpy fallback will be used")


ext_modules = []
if os.environ.get("FEEDERSIM_PURE") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "feedersim._kernels._core",
                    ["src/feedersim/_kernels/_core.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        print("warning: Cython or numpy not available at build time; "
              "installing without compiled kernels")

setup(ext_modules=ext_modules, cmdclass={"build_ext": _OptionalBuildExt})

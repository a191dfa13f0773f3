"""Build script: compiles the optional LCS kernel, falling back to pure Python.

The compiled extension is a speedup, not a requirement. If Cython or a C
compiler is missing, the build succeeds without it and `delm._kernels`
selects the pure-Python implementation at import time.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """build_ext that downgrades compile failures to a warning."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing entirely
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(f"warning: compiled kernels skipped ({exc}); pure-Python fallback will be used")


def _extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("warning: Cython not available; building without compiled kernels")
        return []
    return cythonize(
        [Extension("delm._kernels._lcs_cy", ["src/delm/_kernels/_lcs_cy.pyx"])],
        compiler_directives={"language_level": "3"},
    )


setup(
    ext_modules=_extensions(),
    cmdclass={"build_ext": optional_build_ext},
)

import os

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the pure-Python kernels take over at import time
    cythonize = None

extensions = []
if cythonize is not None and os.environ.get("ENVSYNTH_PURE") != "1":
    extensions = cythonize(
        [Extension("envsynth.toolgraph._ckernels", ["src/envsynth/toolgraph/_ckernels.pyx"], extra_compile_args=["-O2"])],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=extensions)

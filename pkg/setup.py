from setuptools import Extension, setup
from Cython.Build import cythonize

ext = Extension(
    "gprobit._kernels",
    ["src/gprobit/_kernels.pyx"],
)

setup(ext_modules=cythonize([ext], language_level="3"))

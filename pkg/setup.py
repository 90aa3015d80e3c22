import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# -ffp-contract=off: the compiled kernel must round mul and add separately so
# its results are bit-identical to the pure-numpy fallback (no FMA fusion).
extensions = [
    Extension(
        "obft._kernels",
        ["src/obft/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"})
    if cythonize is not None
    else []
)
